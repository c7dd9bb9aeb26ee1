#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "srudgp/core_math.hpp"

namespace srudgp {

struct ExactGpResult {
  double log_marginal_likelihood = 0.0;
  Vector mean;      // latent posterior mean at the queries
  Vector variance;  // latent posterior variance at the queries
  Vector alpha;     // (K + noise I)^-1 y
};

/// Dense GP regression by factorizing K(X,X) + noise_var I directly. Used as
/// the reference that the sparse layer and the ELBO are checked against.
inline ExactGpResult exact_gp_oracle(const Matrix& x, const Vector& y, const Kernel& kernel, double noise_var,
                                     const Matrix& queries) {
  constexpr Eigen::Index kMaxPoints = 200;
  if (x.rows() > kMaxPoints) throw InputError("exact_gp_oracle: at most 200 training points");
  if (x.rows() != y.size()) throw InputError("exact_gp_oracle: X and y disagree on the point count");
  if (queries.size() > 0 && queries.cols() != x.cols()) throw InputError("exact_gp_oracle: query width mismatch");
  Matrix k = gram(kernel, x, x);
  k.diagonal().array() += noise_var;
  const std::vector<double> schedule{0.0, 1e-12, 1e-10, 1e-8};
  const CholFactor chol = cholesky_jittered(0.5 * (k + k.transpose()), schedule);
  const auto lower = chol.lower.triangularView<Eigen::Lower>();

  ExactGpResult out;
  out.alpha = lower.transpose().solve(lower.solve(y));
  const double n = static_cast<double>(x.rows());
  out.log_marginal_likelihood = -0.5 * y.dot(out.alpha) - chol.lower.diagonal().array().log().sum() -
                                0.5 * n * std::log(2.0 * std::numbers::pi);
  if (queries.rows() > 0) {
    const Matrix cross = gram(kernel, x, queries);
    out.mean = cross.transpose() * out.alpha;
    const Matrix v = lower.solve(cross);
    out.variance = gram_diag(kernel, queries) - v.colwise().squaredNorm().transpose();
  }
  return out;
}

/// Variational parameters that make a sparse layer with Z = X reproduce the
/// exact posterior: m = K (K + s I)^-1 y and S = K - K (K + s I)^-1 K.
struct ExactPosteriorAtInputs {
  Vector mean;
  Matrix covariance;
};

inline ExactPosteriorAtInputs exact_posterior_at_inputs(const Matrix& x, const Vector& y, const Kernel& kernel,
                                                        double noise_var) {
  const Matrix k = gram(kernel, x, x);
  Matrix shifted = k;
  shifted.diagonal().array() += noise_var;
  const Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success) throw SingularityError("exact_posterior_at_inputs: singular system", 0.0);
  ExactPosteriorAtInputs out;
  out.mean = k * llt.solve(y);
  // K - K (K + sI)^-1 K = s K (K + sI)^-1, which stays symmetric positive definite.
  const Matrix cov = noise_var * k * llt.solve(Matrix::Identity(x.rows(), x.rows()));
  out.covariance = 0.5 * (cov + cov.transpose());
  return out;
}

}  // namespace srudgp
