#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "srudgp/elbo.hpp"

namespace srudgp {

/// First and second moment estimates per parameter, keyed by name.
struct AdamState {
  long long step = 0;
  std::map<std::string, Matrix> first;
  std::map<std::string, Matrix> second;
};

/// One bias-corrected Adam update for a single parameter block. `ascend`
/// moves along the gradient (maximization).
inline void adam_update(Matrix& value, const Matrix& gradient, Matrix& first, Matrix& second, long long step,
                        const AdamConfig& hyper, bool ascend = true) {
  if (first.size() == 0) first = Matrix::Zero(value.rows(), value.cols());
  if (second.size() == 0) second = Matrix::Zero(value.rows(), value.cols());
  first = hyper.beta1 * first + (1.0 - hyper.beta1) * gradient;
  second = hyper.beta2 * second + (1.0 - hyper.beta2) * gradient.cwiseAbs2();
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  const Matrix delta =
      hyper.lr * ((first / c1).array() / ((second / c2).array().sqrt() + hyper.eps)).matrix();
  if (ascend) {
    value += delta;
  } else {
    value -= delta;
  }
}

/// Ascent step on every parameter in `params` using the matching gradient
/// entries. Parameters are updated in their unconstrained form.
inline void adam_step(std::vector<ParamRef>& params, const GradientTape& tape, AdamState& state,
                      const AdamConfig& hyper) {
  if (state.step < 0) throw ContractError("adam: negative step counter");
  ++state.step;
  for (ParamRef& p : params) {
    const Matrix& g = tape.at(p.name);
    if (!g.allFinite()) throw NumericalError("adam: gradient of '" + p.name + "' is not finite");
    Matrix value = p.get();
    if (g.rows() != value.rows() || g.cols() != value.cols()) {
      throw ContractError("adam: gradient shape mismatch for '" + p.name + "'");
    }
    adam_update(value, g, state.first[p.name], state.second[p.name], state.step, hyper);
    if (!value.allFinite()) throw NumericalError("adam: update of '" + p.name + "' is not finite");
    p.set(value);
  }
}

}  // namespace srudgp
