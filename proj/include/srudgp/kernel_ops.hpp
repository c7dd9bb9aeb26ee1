#pragma once

#include <cmath>
#include <numbers>

#include "srudgp/autodiff.hpp"
#include "srudgp/core_math.hpp"

// Differentiable kernel evaluations. Hyperparameters enter as log-values so
// that gradient steps keep them positive.
namespace srudgp::ad {

struct KernelVars {
  KernelKind kind = KernelKind::ArcCos1;
  Var log_scale;
  Var log_lengthscale;

  Kernel value() const {
    return {kind, std::exp(log_scale.scalar()), std::exp(log_lengthscale.scalar())};
  }
};

inline KernelVars bind_constant(Tape& tape, const Kernel& kernel) {
  return {kernel.kind, tape.constant(std::log(kernel.scale)), tape.constant(std::log(kernel.lengthscale))};
}

namespace detail {

// Gradient through x -> x / |x| applied row by row.
inline Matrix normalize_rows_backward(const Matrix& x, const Matrix& grad_unit) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double norm = x.row(i).norm();
    const RowVector unit = x.row(i) / norm;
    out.row(i) = (grad_unit.row(i) - grad_unit.row(i).dot(unit) * unit) / norm;
  }
  return out;
}

inline Matrix normalize_rows(const Matrix& x) {
  return srudgp::detail::row_norms_nonzero(x).cwiseInverse().asDiagonal() * x;
}

}  // namespace detail

inline Var gram(const KernelVars& kernel, const Var& a, const Var& b) {
  const Kernel k = kernel.value();
  Tape& tape = a.tape();
  return tape.record(
      srudgp::gram(k, a.value(), b.value()), {a, b, kernel.log_scale, kernel.log_lengthscale},
      [k, a, b, kernel](Tape& t, const Matrix& g, const Matrix& out) {
        if (t.needs_grad(kernel.log_scale)) {
          t.accumulate(kernel.log_scale, Matrix::Constant(1, 1, g.cwiseProduct(out).sum()));
        }
        const bool need_a = t.needs_grad(a);
        const bool need_b = t.needs_grad(b);
        switch (k.kind) {
          case KernelKind::ArcCos1: {
            if (!need_a && !need_b) return;
            const Matrix ua = detail::normalize_rows(a.value());
            const Matrix ub = detail::normalize_rows(b.value());
            const Matrix c = srudgp::detail::row_cosines(a.value(), b.value());
            const double pi = std::numbers::pi;
            // dk/dcos = scale (pi - theta) / pi
            const Matrix gc = g.cwiseProduct(
                c.unaryExpr([&](double cosine) { return k.scale * (pi - std::acos(cosine)) / pi; }));
            if (need_a) t.accumulate(a, detail::normalize_rows_backward(a.value(), gc * ub));
            if (need_b) t.accumulate(b, detail::normalize_rows_backward(b.value(), gc.transpose() * ua));
            return;
          }
          case KernelKind::Linear:
            if (need_a) t.accumulate(a, k.scale * g * b.value());
            if (need_b) t.accumulate(b, k.scale * g.transpose() * a.value());
            return;
          case KernelKind::Rbf: {
            const Matrix w = g.cwiseProduct(out);
            const double inv_l2 = 1.0 / (k.lengthscale * k.lengthscale);
            if (need_a) {
              t.accumulate(a, -inv_l2 * (w.rowwise().sum().asDiagonal() * a.value() - w * b.value()));
            }
            if (need_b) {
              t.accumulate(b, -inv_l2 * (w.colwise().sum().transpose().asDiagonal() * b.value() -
                                         w.transpose() * a.value()));
            }
            if (t.needs_grad(kernel.log_lengthscale)) {
              const Matrix d2 = srudgp::detail::squared_distances(a.value(), b.value());
              t.accumulate(kernel.log_lengthscale, Matrix::Constant(1, 1, inv_l2 * w.cwiseProduct(d2).sum()));
            }
            return;
          }
        }
      });
}

// k(x_t, x_t) as a T x 1 column.
inline Var gram_diag(const KernelVars& kernel, const Var& a) {
  const Kernel k = kernel.value();
  return a.tape().record(Matrix(srudgp::gram_diag(k, a.value())), {a, kernel.log_scale},
                         [k, a, kernel](Tape& t, const Matrix& g, const Matrix& out) {
                           if (t.needs_grad(kernel.log_scale)) {
                             t.accumulate(kernel.log_scale, Matrix::Constant(1, 1, g.cwiseProduct(out).sum()));
                           }
                           if (k.kind == KernelKind::Linear && t.needs_grad(a)) {
                             t.accumulate(a, 2.0 * k.scale * g.col(0).asDiagonal() * a.value());
                           }
                         });
}

// Random features approximating `kernel`; see srudgp::kernel_features.
inline Var kernel_features(const RandomFeatureMap& map, const KernelVars& kernel, const Var& x) {
  const Kernel k = kernel.value();
  return x.tape().record(
      srudgp::kernel_features(map, k, x.value()), {x, kernel.log_scale, kernel.log_lengthscale},
      [&map, k, x, kernel](Tape& t, const Matrix& g, const Matrix& out) {
        if (t.needs_grad(kernel.log_scale)) {
          t.accumulate(kernel.log_scale, Matrix::Constant(1, 1, 0.5 * g.cwiseProduct(out).sum()));
        }
        const double coeff = std::sqrt(2.0 * k.scale / static_cast<double>(map.feature_count()));
        switch (k.kind) {
          case KernelKind::ArcCos1: {
            if (!t.needs_grad(x)) return;
            const Matrix unit = detail::normalize_rows(x.value());
            const Matrix proj = unit * map.projection.transpose();
            const Matrix gp = (proj.array() > 0.0).select(coeff * g.array(), 0.0).matrix();
            t.accumulate(x, detail::normalize_rows_backward(x.value(), gp * map.projection));
            return;
          }
          case KernelKind::Linear:
            if (t.needs_grad(x)) t.accumulate(x, std::sqrt(k.scale) * g);
            return;
          case KernelKind::Rbf: {
            const Matrix lin = x.value() * map.projection.transpose() / k.lengthscale;
            Matrix phase = lin;
            phase.rowwise() += map.phase.transpose();
            const Matrix gp = -coeff * g.cwiseProduct(phase.array().sin().matrix());
            if (t.needs_grad(x)) t.accumulate(x, gp * map.projection / k.lengthscale);
            if (t.needs_grad(kernel.log_lengthscale)) {
              t.accumulate(kernel.log_lengthscale, Matrix::Constant(1, 1, -gp.cwiseProduct(lin).sum()));
            }
            return;
          }
        }
      });
}

}  // namespace srudgp::ad
