#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "srudgp/core_math.hpp"
#include "srudgp/error.hpp"

// Reverse-mode differentiation over dense matrices. A Tape owns every
// intermediate value; Var is a cheap handle into it. A tape constructed with
// recording disabled only evaluates, so the same forward code serves both the
// plain prediction API and the gradient computation.
namespace srudgp::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& upstream, const Matrix& output)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var variable(Matrix value) { return push(std::move(value), recording_, nullptr); }
  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

  // Registers the result of an operation; `backward` runs only if some input
  // requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }
  Var record(Matrix value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    if (recording_) {
      for (const Var& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix& value(const Var& v) const { return nodes_[v.id()].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

  void accumulate(const Var& v, const Matrix& g) {
    Node& node = nodes_[v.id()];
    if (!node.needs_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  /// Seeds d(root)/d(root) = 1 and propagates to every leaf variable.
  void backward(const Var& root) {
    if (root.rows() != 1 || root.cols() != 1) throw ContractError("backward: root must be a scalar");
    if (!nodes_[root.id()].needs_grad) return;
    nodes_[root.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.size() == 0) continue;
      node.backward(*this, node.grad, node.value);
    }
  }

  Matrix grad(const Var& v) const {
    const Node& node = nodes_[v.id()];
    if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  bool recording_;
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

/// Puts named parameters on a tape. Names listed as trainable become
/// gradient-carrying leaves; binding the same name again returns the same
/// leaf. Everything else becomes a constant.
class Binder {
 public:
  Binder(Tape& tape, const std::unordered_set<std::string>* trainable) : tape_(tape), trainable_(trainable) {}

  Tape& tape() const { return tape_; }

  Var operator()(const std::string& name, const Matrix& value) {
    if (trainable_ == nullptr || !tape_.recording() || !trainable_->contains(name)) return tape_.constant(value);
    for (const auto& entry : bound_) {
      if (entry.first != name) continue;
      if (entry.second.rows() != value.rows() || entry.second.cols() != value.cols()) {
        throw ContractError("parameter rebound with a different shape: " + name);
      }
      return entry.second;
    }
    Var v = tape_.variable(value);
    bound_.emplace_back(name, v);
    return v;
  }
  Var operator()(const std::string& name, double value) { return (*this)(name, Matrix::Constant(1, 1, value)); }

  const std::vector<std::pair<std::string, Var>>& bound() const { return bound_; }

 private:
  Tape& tape_;
  const std::unordered_set<std::string>* trainable_;
  std::vector<std::pair<std::string, Var>> bound_;
};

namespace detail {
inline void require_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(op) + ": shape mismatch");
  }
}
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  detail::require_shape(a, b, "add");
  return a.tape().record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var operator-(const Var& a, const Var& b) {
  detail::require_shape(a, b, "sub");
  return a.tape().record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

inline Var operator-(const Var& a) {
  return a.tape().record(-a.value(), {a}, [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, -g); });
}

// Matrix product.
inline Var operator*(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InputError("matmul: inner dimension mismatch");
  return a.tape().record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

inline Var scale(const Var& a, double s) {
  return a.tape().record(s * a.value(), {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, s * g); });
}

// Scalar (1x1) variable times matrix.
inline Var scale(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw InputError("scale: factor must be 1x1");
  return a.tape().record(s.scalar() * a.value(), {a, s}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.accumulate(a, s.scalar() * g);
    if (t.needs_grad(s)) t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
  });
}

inline Var add_constant(const Var& a, double c) {
  return a.tape().record((a.value().array() + c).matrix(), {a},
                         [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}

inline Var cwise_mul(const Var& a, const Var& b) {
  detail::require_shape(a, b, "cwise_mul");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

inline Var square(const Var& a) {
  return a.tape().record(a.value().array().square().matrix(), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, 2.0 * g.cwiseProduct(a.value()));
  });
}

inline Var transpose(const Var& a) {
  return a.tape().record(a.value().transpose(), {a},
                         [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g.transpose()); });
}

inline Var sum(const Var& a) {
  return a.tape().record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

// 1 x cols row of column sums.
inline Var colwise_sum(const Var& a) {
  return a.tape().record(a.value().colwise().sum(), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.replicate(a.rows(), 1));
  });
}

inline Var exp(const Var& a) {
  return a.tape().record(a.value().array().exp().matrix(), {a}, [a](Tape& t, const Matrix& g, const Matrix& out) {
    t.accumulate(a, g.cwiseProduct(out));
  });
}

inline Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw DomainError("log of a non-positive value");
  return a.tape().record(a.value().array().log().matrix(), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.cwiseQuotient(a.value()));
  });
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  return a.tape().record(a.value().unaryExpr([](double x) { return sigmoid(x); }), {a},
                         [a](Tape& t, const Matrix& g, const Matrix& s) {
                           t.accumulate(a, g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
                         });
}

inline Var sqrt(const Var& a) {
  if ((a.value().array() < 0.0).any()) throw DomainError("sqrt of a negative value");
  return a.tape().record(a.value().cwiseSqrt(), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, (0.5 * g.array() / a.value().array().sqrt()).matrix());
  });
}

// max(a, floor) elementwise; gradient passes only where a > floor.
inline Var floor_at(const Var& a, double floor) {
  return a.tape().record(a.value().cwiseMax(floor), {a}, [a, floor](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, (a.value().array() > floor).select(g, 0.0).matrix());
  });
}

// Adds a 1 x cols row to every row of a.
inline Var add_rowwise(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InputError("add_rowwise: shape mismatch");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw InputError("slice_rows: out of range");
  return a.tape().record(a.value().middleRows(start, count), {a},
                         [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix full = Matrix::Zero(a.rows(), a.cols());
                           full.middleRows(start, count) = g;
                           t.accumulate(a, full);
                         });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw InputError("slice_cols: out of range");
  return a.tape().record(a.value().middleCols(start, count), {a},
                         [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
                           Matrix full = Matrix::Zero(a.rows(), a.cols());
                           full.middleCols(start, count) = g;
                           t.accumulate(a, full);
                         });
}

// Horizontal concatenation of blocks with equal row counts.
inline Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw InputError("hcat: no blocks");
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != parts.front().rows()) throw InputError("hcat: row mismatch");
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
    Eigen::Index at = 0;
    for (const Var& p : parts) {
      if (t.needs_grad(p)) t.accumulate(p, g.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

namespace detail {
// Strictly lower part plus half the diagonal; the adjoint of taking a
// Cholesky factor's lower triangle.
inline Matrix phi(const Matrix& x) {
  Matrix out = x.triangularView<Eigen::Lower>();
  out.diagonal() *= 0.5;
  return out;
}
}  // namespace detail

// Lower Cholesky factor of a + jitter I.
inline Var cholesky(const Var& a, double jitter) {
  Matrix shifted = a.value();
  shifted.diagonal().array() += jitter;
  Eigen::LLT<Matrix> llt(shifted);
  if (llt.info() != Eigen::Success) {
    throw SingularityError("cholesky: matrix is not positive definite", jitter);
  }
  Matrix lower = llt.matrixL();
  return a.tape().record(std::move(lower), {a}, [a](Tape& t, const Matrix& g, const Matrix& l) {
    const Matrix gl = g.triangularView<Eigen::Lower>();
    Matrix p = detail::phi(l.transpose() * gl);
    // S = L^-T P L^-1
    const auto lt = l.triangularView<Eigen::Lower>();
    lt.transpose().solveInPlace(p);
    Matrix s = p.transpose();
    lt.transpose().solveInPlace(s);
    s.transposeInPlace();
    t.accumulate(a, 0.5 * (s + s.transpose()));
  });
}

// Solves L X = B for lower-triangular L.
inline Var solve_lower(const Var& l, const Var& b) {
  if (l.rows() != l.cols() || l.cols() != b.rows()) throw InputError("solve_lower: shape mismatch");
  Matrix x = l.value().triangularView<Eigen::Lower>().solve(b.value());
  return l.tape().record(std::move(x), {l, b}, [l, b](Tape& t, const Matrix& g, const Matrix& x) {
    const Matrix gb = l.value().triangularView<Eigen::Lower>().transpose().solve(g);
    if (t.needs_grad(b)) t.accumulate(b, gb);
    if (t.needs_grad(l)) t.accumulate(l, (-gb * x.transpose()).triangularView<Eigen::Lower>().toDenseMatrix());
  });
}

// Solves L^T X = B for lower-triangular L.
inline Var solve_lower_transposed(const Var& l, const Var& b) {
  if (l.rows() != l.cols() || l.cols() != b.rows()) {
    throw InputError("solve_lower_transposed: shape mismatch");
  }
  Matrix x = l.value().triangularView<Eigen::Lower>().transpose().solve(b.value());
  return l.tape().record(std::move(x), {l, b}, [l, b](Tape& t, const Matrix& g, const Matrix& x) {
    const Matrix gb = l.value().triangularView<Eigen::Lower>().solve(g);
    if (t.needs_grad(b)) t.accumulate(b, gb);
    if (t.needs_grad(l)) t.accumulate(l, (-x * gb.transpose()).triangularView<Eigen::Lower>().toDenseMatrix());
  });
}

// Sum of log of the diagonal (half the log-determinant of L L^T).
inline Var sum_log_diag(const Var& l) {
  const auto diag = l.value().diagonal().array();
  if ((diag <= 0.0).any()) throw DomainError("sum_log_diag: non-positive diagonal");
  return l.tape().record(Matrix::Constant(1, 1, diag.log().sum()), {l}, [l](Tape& t, const Matrix& g, const Matrix&) {
    Matrix out = Matrix::Zero(l.rows(), l.cols());
    out.diagonal() = g(0, 0) * l.value().diagonal().cwiseInverse();
    t.accumulate(l, out);
  });
}

// Lower-triangular factor from an unconstrained square matrix: strictly lower
// entries pass through, the diagonal goes through softplus, the strict upper
// triangle is ignored.
inline Matrix lower_softplus_diag_value(const Matrix& raw) {
  Matrix out = raw.triangularView<Eigen::StrictlyLower>();
  for (Eigen::Index i = 0; i < raw.rows(); ++i) out(i, i) = softplus(raw(i, i));
  return out;
}

inline Var lower_softplus_diag(const Var& raw) {
  if (raw.rows() != raw.cols()) throw InputError("lower_softplus_diag: matrix is not square");
  return raw.tape().record(lower_softplus_diag_value(raw.value()), {raw}, [raw](Tape& t, const Matrix& g, const Matrix&) {
    Matrix out = g.triangularView<Eigen::StrictlyLower>();
    for (Eigen::Index i = 0; i < raw.rows(); ++i) out(i, i) = g(i, i) * sigmoid(raw.value()(i, i));
    t.accumulate(raw, out);
  });
}

}  // namespace srudgp::ad
