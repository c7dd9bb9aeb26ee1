#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "srudgp/model.hpp"

namespace srudgp {

/// One utterance: T x D_in inputs and T x D_out targets.
struct SequenceBatch {
  Matrix inputs;
  Matrix targets;
  std::string id;

  Eigen::Index frames() const { return inputs.rows(); }
};

struct ElboBreakdown {
  double loglik = 0.0;
  std::vector<double> kl_per_layer;
  double kl_scale = 0.0;
  double total = 0.0;

  double kl_sum() const {
    double s = 0.0;
    for (double k : kl_per_layer) s += k;
    return s;
  }
};

/// Derivatives of one objective evaluation, one entry per trainable
/// parameter in `parameters(model)` order.
struct GradientTape {
  ElboBreakdown elbo;
  std::vector<std::pair<std::string, Matrix>> gradients;

  const Matrix& at(const std::string& name) const {
    for (const auto& [n, g] : gradients) {
      if (n == name) return g;
    }
    throw ContractError("no gradient recorded for '" + name + "'");
  }
};

namespace ad {

struct ElboTerms {
  Var total;
  Var loglik;
  std::vector<Var> kl;
  double kl_scale = 0.0;
};

/// Expected Gaussian log-likelihood of `y` under N(mean, variance) plus
/// observation noise with log-variance `log_noise` (1 x 1 or 1 x D).
inline Var expected_loglik(const Var& mean, const Var& variance, const Matrix& y, const Var& log_noise) {
  Tape& tape = mean.tape();
  const double steps = static_cast<double>(y.rows());
  const double dims = static_cast<double>(y.cols());
  const Var residual = mean - tape.constant(y);
  Var spread = square(residual);
  if (variance.valid()) spread = spread + variance;
  const Var inv_noise = exp(-log_noise);
  Var quad;
  Var log_det;
  if (log_noise.cols() == 1) {
    quad = scale(sum(spread), inv_noise);
    log_det = scale(log_noise, dims);
  } else {
    quad = sum(cwise_mul(colwise_sum(spread), inv_noise));
    log_det = sum(log_noise);
  }
  const double constant = -0.5 * steps * dims * std::log(2.0 * std::numbers::pi);
  return add_constant(scale(quad, -0.5) + scale(log_det, -0.5 * steps), constant);
}

/// ELBO contribution of one utterance:
///   mean over S samples of E[log p(y | h^L)] - kl_scale * sum of layer KLs
/// with kl_scale = S T_u / N. In frame mode the per-frame S / N summed over
/// the T_u frames of the batch gives the same coefficient.
inline ElboTerms elbo_terms(Binder& binder, const Model& model, const SequenceBatch& batch, Objective objective,
                            NoiseSource& noise) {
  Tape& tape = binder.tape();
  const int samples = model.config.samples;
  const StackMode mode = objective == Objective::Utterance ? StackMode::SampleUtterance : StackMode::SampleFrame;
  const Var x = tape.constant(batch.inputs);
  const Var log_noise = binder("log_noise", Matrix(model.log_noise));
  ElboTerms terms;
  Var loglik_sum;
  for (int s = 0; s < samples; ++s) {
    StackRun run = stack_forward(binder, model.layers, x, mode, s == 0, noise, model.options);
    const Var ll = expected_loglik(run.outputs.back(), run.final_variance, batch.targets, log_noise);
    loglik_sum = s == 0 ? ll : loglik_sum + ll;
    if (s == 0) terms.kl = std::move(run.kl);
  }
  terms.loglik = scale(loglik_sum, 1.0 / samples);
  terms.kl_scale = samples * static_cast<double>(batch.frames()) / model.total_frames;
  Var kl_sum = tape.constant(0.0);
  for (const Var& k : terms.kl) kl_sum = kl_sum + k;
  terms.total = terms.loglik - scale(kl_sum, terms.kl_scale);
  return terms;
}

}  // namespace ad

namespace detail {

inline void check_batch(const Model& model, const SequenceBatch& batch) {
  if (batch.inputs.rows() != batch.targets.rows()) throw InputError("utterance inputs and targets differ in length");
  if (batch.inputs.cols() != model.input_dim()) throw InputError("utterance input width does not match the model");
  if (batch.targets.cols() != model.output_dim()) throw InputError("utterance target width does not match the model");
}

inline ElboBreakdown breakdown(const ad::ElboTerms& terms) {
  ElboBreakdown out;
  out.loglik = terms.loglik.scalar();
  if (!std::isfinite(out.loglik)) throw NumericalError("elbo: expected log-likelihood is not finite");
  for (std::size_t i = 0; i < terms.kl.size(); ++i) {
    out.kl_per_layer.push_back(terms.kl[i].scalar());
    if (!std::isfinite(out.kl_per_layer.back())) {
      throw NumericalError("elbo: KL term of layer " + std::to_string(i) + " is not finite");
    }
  }
  out.kl_scale = terms.kl_scale;
  out.total = out.loglik - out.kl_scale * out.kl_sum();
  return out;
}

}  // namespace detail

inline ElboBreakdown elbo(const Model& model, const SequenceBatch& batch, Objective objective, NoiseSource& noise) {
  detail::check_batch(model, batch);
  ad::Tape tape(false);
  ad::Binder binder(tape, nullptr);
  return detail::breakdown(ad::elbo_terms(binder, model, batch, objective, noise));
}

inline ElboBreakdown elbo_utterance(const Model& model, const SequenceBatch& batch, NoiseSource& noise) {
  return elbo(model, batch, Objective::Utterance, noise);
}

inline ElboBreakdown elbo_frame(const Model& model, const SequenceBatch& batch, NoiseSource& noise) {
  return elbo(model, batch, Objective::Frame, noise);
}

/// Exact derivatives of the ELBO with respect to every trainable parameter,
/// with the Monte Carlo noise held fixed by `noise`.
inline GradientTape grad(Model& model, const SequenceBatch& batch, Objective objective, NoiseSource& noise) {
  detail::check_batch(model, batch);
  const std::vector<ParamRef> params = parameters(model);
  std::unordered_set<std::string> names;
  for (const ParamRef& p : params) names.insert(p.name);
  ad::Tape tape;
  ad::Binder binder(tape, &names);
  const ad::ElboTerms terms = ad::elbo_terms(binder, model, batch, objective, noise);
  GradientTape out;
  out.elbo = detail::breakdown(terms);
  tape.backward(terms.total);
  for (const ParamRef& p : params) {
    Matrix g;
    for (const auto& [name, var] : binder.bound()) {
      if (name == p.name) g = tape.grad(var);
    }
    if (g.size() == 0) g = Matrix::Zero(p.get().rows(), p.get().cols());
    if (!g.allFinite()) throw NumericalError("gradient of '" + p.name + "' is not finite");
    out.gradients.emplace_back(p.name, std::move(g));
  }
  return out;
}

/// Mean propagation through the stack; returns the final predictive means.
inline Matrix generate(const Model& model, const Matrix& x) {
  NoiseSource none = NoiseSource::zeros();
  return stack_forward(model.layers, x, StackMode::Mean, none, model.options).outputs.back();
}

}  // namespace srudgp
