#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "srudgp/error.hpp"

namespace srudgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class KernelKind { ArcCos1, Linear, Rbf };

inline std::string_view to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::ArcCos1: return "arccos1";
    case KernelKind::Linear: return "linear";
    case KernelKind::Rbf: return "rbf";
  }
  return "?";
}

inline KernelKind kernel_kind_from_string(std::string_view name) {
  if (name == "arccos1") return KernelKind::ArcCos1;
  if (name == "linear") return KernelKind::Linear;
  if (name == "rbf") return KernelKind::Rbf;
  throw ConfigError("unknown kernel kind '" + std::string(name) + "'");
}

// Positive definite covariance function. ArcCos1 is the order-1 arc-cosine
// kernel normalized by the input norms, so it depends on the angle only:
//   k(x, y) = scale * J(theta) / pi,  J(theta) = sin(theta) + (pi - theta) cos(theta).
struct Kernel {
  KernelKind kind = KernelKind::ArcCos1;
  double scale = 1.0;
  double lengthscale = 1.0;  // rbf only
};

namespace detail {

inline void require_same_width(const Matrix& a, const Matrix& b, const char* what) {
  if (a.cols() != b.cols()) {
    throw InputError(std::string(what) + ": dimension mismatch (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.cols()) + ")");
  }
}

inline Vector row_norms_nonzero(const Matrix& a) {
  Vector norms = a.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0)) throw DomainError("arccos1 kernel is undefined for a zero input vector");
  }
  return norms;
}

// Cosines between rows of a and b, clamped into [-1, 1].
inline Matrix row_cosines(const Matrix& a, const Matrix& b) {
  const Vector na = row_norms_nonzero(a);
  const Vector nb = row_norms_nonzero(b);
  Matrix c = (na.cwiseInverse().asDiagonal() * a) * (nb.cwiseInverse().asDiagonal() * b).transpose();
  return c.cwiseMax(-1.0).cwiseMin(1.0);
}

inline Matrix squared_distances(const Matrix& a, const Matrix& b) {
  Matrix d(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    d.col(j) = (a.rowwise() - b.row(j)).rowwise().squaredNorm();
  }
  return d;
}

}  // namespace detail

/// Gram matrix K(A, B); entry (i, j) is k(A_i, B_j).
inline Matrix gram(const Kernel& kernel, const Matrix& a, const Matrix& b) {
  detail::require_same_width(a, b, "gram");
  switch (kernel.kind) {
    case KernelKind::ArcCos1: {
      const Matrix c = detail::row_cosines(a, b);
      const double pi = std::numbers::pi;
      return c.unaryExpr([&](double cosine) {
        const double theta = std::acos(cosine);
        return kernel.scale * (std::sin(theta) + (pi - theta) * cosine) / pi;
      });
    }
    case KernelKind::Linear:
      return kernel.scale * a * b.transpose();
    case KernelKind::Rbf: {
      const double inv = 1.0 / (2.0 * kernel.lengthscale * kernel.lengthscale);
      return (detail::squared_distances(a, b) * -inv).array().exp().matrix() * kernel.scale;
    }
  }
  return {};
}

inline double kernel_eval(const Kernel& kernel, std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InputError("kernel_eval: dimension mismatch");
  const auto n = static_cast<Eigen::Index>(x.size());
  const Matrix a = Eigen::Map<const RowVector>(x.data(), n);
  const Matrix b = Eigen::Map<const RowVector>(y.data(), n);
  return gram(kernel, a, b)(0, 0);
}

/// Diagonal k(A_i, A_i) without forming the full Gram matrix.
inline Vector gram_diag(const Kernel& kernel, const Matrix& a) {
  switch (kernel.kind) {
    case KernelKind::ArcCos1:
      detail::row_norms_nonzero(a);
      return Vector::Constant(a.rows(), kernel.scale);
    case KernelKind::Linear:
      return kernel.scale * a.rowwise().squaredNorm();
    case KernelKind::Rbf:
      return Vector::Constant(a.rows(), kernel.scale);
  }
  return {};
}

struct CholFactor {
  Matrix lower;
  double jitter = 0.0;
};

inline const std::vector<double>& default_jitter_schedule() {
  static const std::vector<double> schedule{1e-6, 1e-5, 1e-4};
  return schedule;
}

/// Factorizes M + jitter*I for the first jitter in the schedule that yields a
/// strictly positive diagonal.
inline CholFactor cholesky_jittered(const Matrix& m, std::span<const double> jitter_schedule) {
  if (m.rows() != m.cols()) throw InputError("cholesky_jittered: matrix is not square");
  const double tol = 1e-8 * std::max(1.0, m.cwiseAbs().maxCoeff());
  if (m.size() > 0 && (m - m.transpose()).cwiseAbs().maxCoeff() > tol) {
    throw InputError("cholesky_jittered: matrix is not symmetric");
  }
  double largest = 0.0;
  for (double jitter : jitter_schedule) {
    largest = std::max(largest, jitter);
    Matrix shifted = m;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success) continue;
    Matrix lower = llt.matrixL();
    const auto diag = lower.diagonal().array();
    if (!diag.isFinite().all() || (diag <= 0.0).any()) continue;
    return {std::move(lower), jitter};
  }
  throw SingularityError("cholesky failed for every jitter in the schedule (largest " +
                             std::to_string(largest) + ")",
                         largest);
}

/// Frozen random projection whose features approximate a kernel by inner
/// products. ArcCos1 maps use ReLU features; Rbf maps use random Fourier
/// features with uniform phases.
struct RandomFeatureMap {
  KernelKind kind = KernelKind::ArcCos1;
  Matrix projection;  // feature_count x input_dim, standard normal
  Vector phase;       // rbf only, uniform on [0, 2 pi)

  Eigen::Index feature_count() const { return projection.rows(); }
  Eigen::Index input_dim() const { return projection.cols(); }

  static RandomFeatureMap draw(KernelKind kind, Eigen::Index feature_count, Eigen::Index input_dim,
                               std::mt19937_64& rng) {
    RandomFeatureMap map;
    map.kind = kind;
    map.projection.resize(feature_count, input_dim);
    std::normal_distribution<double> normal;
    for (Eigen::Index i = 0; i < feature_count; ++i) {
      for (Eigen::Index j = 0; j < input_dim; ++j) map.projection(i, j) = normal(rng);
    }
    if (kind == KernelKind::Rbf) {
      std::uniform_real_distribution<double> uniform(0.0, 2.0 * std::numbers::pi);
      map.phase.resize(feature_count);
      for (Eigen::Index i = 0; i < feature_count; ++i) map.phase(i) = uniform(rng);
    }
    return map;
  }
};

/// Raw features of the map: sqrt(2/M) max(0, W x) for arccos1 (estimating the
/// unnormalized arc-cosine kernel |x||y| J(theta) / pi), sqrt(2/M) cos(W x + b)
/// for rbf with unit lengthscale.
inline Matrix random_features(const RandomFeatureMap& map, const Matrix& x) {
  if (x.cols() != map.input_dim()) throw InputError("random_features: dimension mismatch");
  const double norm = std::sqrt(2.0 / static_cast<double>(map.feature_count()));
  Matrix proj = x * map.projection.transpose();
  if (map.kind == KernelKind::Rbf) {
    proj.rowwise() += map.phase.transpose();
    return norm * proj.array().cos().matrix();
  }
  return norm * proj.cwiseMax(0.0);
}

/// Features whose inner products approximate `kernel` itself, including its
/// scale, the arccos1 input normalization and the rbf lengthscale. The linear
/// kernel has an exact finite feature map and ignores the random projection.
inline Matrix kernel_features(const RandomFeatureMap& map, const Kernel& kernel, const Matrix& x) {
  const double root_scale = std::sqrt(kernel.scale);
  switch (kernel.kind) {
    case KernelKind::ArcCos1: {
      const Vector norms = detail::row_norms_nonzero(x);
      return root_scale * random_features(map, norms.cwiseInverse().asDiagonal() * x);
    }
    case KernelKind::Linear:
      return root_scale * x;
    case KernelKind::Rbf:
      return root_scale * random_features(map, x / kernel.lengthscale);
  }
  return {};
}

}  // namespace srudgp
