#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "srudgp/autodiff.hpp"
#include "srudgp/core_math.hpp"
#include "srudgp/kernel_ops.hpp"

namespace srudgp {

struct SvgpOptions {
  std::vector<double> jitter = default_jitter_schedule();
  double variance_floor = 1e-10;
};

/// Trainable state of one sparse variational GP function with D_out
/// independent outputs sharing inducing inputs and kernel.
///
/// The variational covariance of output d is S_d = L_d L_d^T where L_d is
/// built from `cov_raw[d]`: strictly lower entries as stored, diagonal passed
/// through softplus. The random feature map is frozen at construction.
struct SvgpLayerParams {
  Matrix inducing;              // Z, M x D_in
  Matrix mean;                  // column d is m_d, M x D_out
  std::vector<Matrix> cov_raw;  // D_out unconstrained M x M matrices
  Kernel kernel;
  RandomFeatureMap features;

  Eigen::Index inducing_count() const { return inducing.rows(); }
  Eigen::Index input_dim() const { return inducing.cols(); }
  Eigen::Index output_dim() const { return mean.cols(); }

  Matrix cov_factor(Eigen::Index d) const { return ad::lower_softplus_diag_value(cov_raw.at(d)); }
  Matrix cov(Eigen::Index d) const {
    const Matrix l = cov_factor(d);
    return l * l.transpose();
  }
  void set_cov_factor(Eigen::Index d, const Matrix& lower) {
    Matrix raw = lower.triangularView<Eigen::StrictlyLower>();
    for (Eigen::Index i = 0; i < lower.rows(); ++i) {
      if (!(lower(i, i) > 0.0)) throw DomainError("covariance factor needs a positive diagonal");
      raw(i, i) = ad::softplus_inverse(lower(i, i));
    }
    cov_raw.at(d) = std::move(raw);
  }

  void validate() const {
    if (inducing.rows() < 1) throw ConfigError("svgp: at least one inducing point is required");
    if (!inducing.allFinite()) throw DomainError("svgp: inducing inputs must be finite");
    if (mean.rows() != inducing.rows()) throw ConfigError("svgp: variational mean has wrong row count");
    if (static_cast<Eigen::Index>(cov_raw.size()) != mean.cols()) {
      throw ConfigError("svgp: one covariance factor per output dimension is required");
    }
    for (const Matrix& raw : cov_raw) {
      if (raw.rows() != inducing.rows() || raw.cols() != inducing.rows()) {
        throw ConfigError("svgp: covariance factor has wrong shape");
      }
    }
    if (kernel.kind != KernelKind::Linear && features.input_dim() != input_dim()) {
      throw ConfigError("svgp: random feature map width does not match the input");
    }
  }

  /// Z ~ N(0, I), m = 0, L = 0.1 I, unit kernel scale.
  static SvgpLayerParams random_init(const Kernel& kernel, Eigen::Index inducing_count, Eigen::Index input_dim,
                                     Eigen::Index output_dim, Eigen::Index feature_count, std::mt19937_64& rng) {
    SvgpLayerParams p;
    p.kernel = kernel;
    p.inducing.resize(inducing_count, input_dim);
    std::normal_distribution<double> normal;
    for (Eigen::Index i = 0; i < p.inducing.size(); ++i) p.inducing.data()[i] = normal(rng);
    p.mean = Matrix::Zero(inducing_count, output_dim);
    Matrix raw = Matrix::Zero(inducing_count, inducing_count);
    raw.diagonal().setConstant(ad::softplus_inverse(0.1));
    p.cov_raw.assign(static_cast<std::size_t>(output_dim), raw);
    const KernelKind feature_kind = kernel.kind == KernelKind::Rbf ? KernelKind::Rbf : KernelKind::ArcCos1;
    p.features = RandomFeatureMap::draw(feature_kind, feature_count, input_dim, rng);
    return p;
  }
};

enum class CovMode { None, Diag, LowRank };

/// Predictive distribution of one SVGP function over a whole sequence.
/// Diag mode keeps per-frame variances; low-rank mode keeps the factor pair
/// (feature_factor shared by all outputs, inducing_factor per output) whose
/// outer products sum to the frame covariance.
struct PosteriorSequence {
  CovMode mode = CovMode::None;
  Matrix mean;                          // T x D_out
  Matrix variance;                      // T x D_out, diag mode
  Matrix feature_factor;                // T x M_feat, low-rank mode
  std::vector<Matrix> inducing_factor;  // D_out blocks of T x M, low-rank mode

  Matrix covariance(Eigen::Index d) const {
    if (mode == CovMode::Diag) return variance.col(d).asDiagonal();
    if (mode == CovMode::LowRank) {
      const Matrix& l2 = inducing_factor.at(d);
      return feature_factor * feature_factor.transpose() + l2 * l2.transpose();
    }
    throw ContractError("posterior carries no covariance");
  }
};

/// Standard-normal draws consumed by sample_posterior. Low-rank mode reads
/// `feature` (M_feat x D_out) and `inducing` (M x D_out); diag mode reads
/// `frame` (T x D_out).
struct PosteriorNoise {
  Matrix feature;
  Matrix inducing;
  Matrix frame;
};

namespace ad {

struct SvgpVars {
  Var inducing;
  Var mean;
  std::vector<Var> cov_factor;
  KernelVars kernel;
  const SvgpLayerParams* params = nullptr;
};

/// Binds one layer under `prefix`: prefix.Z, prefix.m, prefix.S_raw<d>,
/// prefix.log_scale, prefix.log_lengthscale.
inline SvgpVars bind(Binder& binder, const SvgpLayerParams& p, const std::string& prefix) {
  SvgpVars v;
  v.params = &p;
  v.inducing = binder(prefix + ".Z", p.inducing);
  v.mean = binder(prefix + ".m", p.mean);
  for (std::size_t d = 0; d < p.cov_raw.size(); ++d) {
    v.cov_factor.push_back(lower_softplus_diag(binder(prefix + ".S_raw" + std::to_string(d), p.cov_raw[d])));
  }
  v.kernel.kind = p.kernel.kind;
  v.kernel.log_scale = binder(prefix + ".log_scale", std::log(p.kernel.scale));
  v.kernel.log_lengthscale = binder(prefix + ".log_lengthscale", std::log(p.kernel.lengthscale));
  return v;
}

inline SvgpVars bind_constant(Tape& tape, const SvgpLayerParams& p) {
  Binder binder(tape, nullptr);
  return bind(binder, p, "");
}

inline Var cholesky_jittered(const Var& m, const std::vector<double>& schedule) {
  double largest = 0.0;
  for (double jitter : schedule) {
    largest = std::max(largest, jitter);
    try {
      return cholesky(m, jitter);
    } catch (const SingularityError&) {
    }
  }
  throw SingularityError("K(Z,Z) is singular for every jitter in the schedule", largest);
}

/// Quantities shared by every output of one prediction:
/// chol_zz = chol(K(Z,Z)), whitened = chol_zz^-1 K(Z,H), interp = A = K(Z,Z)^-1 K(Z,H).
struct Conditional {
  Var input;
  Var chol_zz;
  Var whitened;
  Var interp;
};

inline Conditional condition(const SvgpVars& v, const Var& h, const SvgpOptions& options) {
  if (h.cols() != v.inducing.cols()) throw InputError("svgp predict: input width does not match Z");
  if (!h.value().allFinite()) throw DomainError("svgp predict: input is not finite");
  Conditional c;
  c.input = h;
  c.chol_zz = cholesky_jittered(gram(v.kernel, v.inducing, v.inducing), options.jitter);
  c.whitened = solve_lower(c.chol_zz, gram(v.kernel, v.inducing, h));
  c.interp = solve_lower_transposed(c.chol_zz, c.whitened);
  return c;
}

/// mu = m(H) + A^T (m - m(Z)) with the zero prior mean function m(.) = 0.
inline Var predictive_mean(const Conditional& c, const SvgpVars& v) {
  return transpose(c.interp) * v.mean;
}

/// Diagonal of K(H,H) - A^T (K(Z,Z) - S_d) A for every output d, floored.
inline Var predictive_variance(const Conditional& c, const SvgpVars& v, const SvgpOptions& options) {
  const Var prior = gram_diag(v.kernel, c.input);                             // T x 1
  const Var nystrom = transpose(colwise_sum(square(c.whitened)));             // T x 1
  const Var base = prior - nystrom;
  std::vector<Var> columns;
  columns.reserve(v.cov_factor.size());
  for (const Var& l : v.cov_factor) {
    const Var correction = transpose(colwise_sum(square(transpose(l) * c.interp)));
    columns.push_back(floor_at(base + correction, options.variance_floor));
  }
  return hcat(columns);
}

/// One utterance-level draw mu + L1 e1 + L2_d e2_d for all outputs at once,
/// written as Phi(H) E1 + A^T (m + [L_d e2_d] - Phi(Z) E1).
inline Var sample_lowrank(const Conditional& c, const SvgpVars& v, const Var& feature_noise,
                          const Var& inducing_noise) {
  const RandomFeatureMap& map = v.params->features;
  std::vector<Var> scaled;
  scaled.reserve(v.cov_factor.size());
  for (std::size_t d = 0; d < v.cov_factor.size(); ++d) {
    scaled.push_back(v.cov_factor[d] * slice_cols(inducing_noise, static_cast<Eigen::Index>(d), 1));
  }
  const Var phi_h = kernel_features(map, v.kernel, c.input);
  const Var phi_z = kernel_features(map, v.kernel, v.inducing);
  const Var at_inducing = v.mean + hcat(scaled) - phi_z * feature_noise;
  return phi_h * feature_noise + transpose(c.interp) * at_inducing;
}

/// Frame-independent draw mu + sqrt(var) * e.
inline Var sample_diag(const Var& mean, const Var& variance, const Var& frame_noise) {
  return mean + cwise_mul(sqrt(variance), frame_noise);
}

/// Sum over outputs of KL(N(m_d, S_d) || N(0, K(Z,Z))).
inline Var kl_divergence(const SvgpVars& v, const Var& chol_zz) {
  const auto m = static_cast<double>(v.inducing.rows());
  const auto outputs = static_cast<double>(v.cov_factor.size());
  Var trace_and_quad = sum(square(solve_lower(chol_zz, v.mean)));
  Var log_det_s = v.cov_factor.empty() ? chol_zz.tape().constant(0.0) : sum_log_diag(v.cov_factor.front());
  for (std::size_t d = 0; d < v.cov_factor.size(); ++d) {
    trace_and_quad = trace_and_quad + sum(square(solve_lower(chol_zz, v.cov_factor[d])));
    if (d > 0) log_det_s = log_det_s + sum_log_diag(v.cov_factor[d]);
  }
  const Var half = add_constant(scale(trace_and_quad, 0.5), -0.5 * m * outputs);
  return half + scale(sum_log_diag(chol_zz), outputs) - log_det_s;
}

inline Var kl_divergence(const SvgpVars& v, const SvgpOptions& options) {
  return kl_divergence(v, cholesky_jittered(gram(v.kernel, v.inducing, v.inducing), options.jitter));
}

}  // namespace ad

/// Posterior over the outputs at every row of `h_prev`, all frames at once.
inline PosteriorSequence predict(const SvgpLayerParams& params, const Matrix& h_prev, CovMode mode,
                                 const SvgpOptions& options = {}) {
  params.validate();
  ad::Tape tape(false);
  const ad::SvgpVars v = ad::bind_constant(tape, params);
  const ad::Conditional c = ad::condition(v, tape.constant(h_prev), options);
  PosteriorSequence post;
  post.mode = mode;
  post.mean = ad::predictive_mean(c, v).value();
  if (mode == CovMode::Diag) {
    post.variance = ad::predictive_variance(c, v, options).value();
  } else if (mode == CovMode::LowRank) {
    const Matrix interp_t = c.interp.value().transpose();
    post.feature_factor = kernel_features(params.features, params.kernel, h_prev) -
                          interp_t * kernel_features(params.features, params.kernel, params.inducing);
    for (Eigen::Index d = 0; d < params.output_dim(); ++d) {
      post.inducing_factor.push_back(interp_t * params.cov_factor(d));
    }
  }
  return post;
}

inline double kl_penalty(const SvgpLayerParams& params, const SvgpOptions& options = {}) {
  params.validate();
  ad::Tape tape(false);
  return ad::kl_divergence(ad::bind_constant(tape, params), options).scalar();
}

/// Reparameterized draw from a diag or low-rank posterior.
inline Matrix sample_posterior(const PosteriorSequence& post, const PosteriorNoise& noise) {
  const Eigen::Index outputs = post.mean.cols();
  switch (post.mode) {
    case CovMode::LowRank: {
      if (noise.feature.rows() != post.feature_factor.cols() || noise.feature.cols() != outputs ||
          noise.inducing.cols() != outputs) {
        throw InputError("sample_posterior: noise shape does not match the posterior");
      }
      Matrix out = post.mean + post.feature_factor * noise.feature;
      for (Eigen::Index d = 0; d < outputs; ++d) {
        out.col(d) += post.inducing_factor.at(d) * noise.inducing.col(d);
      }
      return out;
    }
    case CovMode::Diag:
      if (noise.frame.rows() != post.mean.rows() || noise.frame.cols() != outputs) {
        throw InputError("sample_posterior: noise shape does not match the posterior");
      }
      return post.mean + post.variance.cwiseSqrt().cwiseProduct(noise.frame);
    case CovMode::None:
      break;
  }
  throw ContractError("sample_posterior: posterior was predicted without covariance");
}

/// Makes q(u_d) equal the prior N(0, K(Z,Z) + jitter I) for every output,
/// using the same jittered factor that prediction uses.
inline void set_to_prior(SvgpLayerParams& params, const SvgpOptions& options = {}) {
  const CholFactor chol = cholesky_jittered(gram(params.kernel, params.inducing, params.inducing), options.jitter);
  params.mean.setZero();
  for (Eigen::Index d = 0; d < params.output_dim(); ++d) params.set_cov_factor(d, chol.lower);
}

}  // namespace srudgp
