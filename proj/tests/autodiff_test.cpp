#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "srudgp/autodiff.hpp"
#include "srudgp/kernel_ops.hpp"

namespace srudgp::ad {
namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

Matrix spd(Eigen::Index n, std::mt19937_64& rng) {
  const Matrix a = random_matrix(n, n, rng);
  return a * a.transpose() + static_cast<double>(n) * Matrix::Identity(n, n);
}

// Compares reverse-mode gradients of a scalar function of one matrix input
// with central differences.
void expect_gradient_matches(const std::function<Var(Tape&, const Var&)>& f, const Matrix& at,
                             double tol = 1e-6) {
  Tape tape;
  const Var x = tape.variable(at);
  const Var y = f(tape, x);
  tape.backward(y);
  const Matrix analytic = tape.grad(x);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    Matrix plus = at;
    Matrix minus = at;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    Tape tp(false);
    Tape tm(false);
    const double fd = (f(tp, tp.constant(plus)).scalar() - f(tm, tm.constant(minus)).scalar()) / (2 * h);
    const double a = analytic.data()[i];
    EXPECT_NEAR(a, fd, tol * std::max(1.0, std::abs(fd))) << "entry " << i;
  }
}

TEST(Tape, NonRecordingTapeStoresNoGradients) {
  Tape tape(false);
  const Var x = tape.variable(Matrix::Ones(2, 2));
  const Var y = sum(x * x);
  EXPECT_FALSE(tape.needs_grad(y));
  tape.backward(y);
  EXPECT_TRUE(tape.grad(x).isZero());
  EXPECT_DOUBLE_EQ(y.scalar(), 8.0);
}

TEST(Tape, BackwardRequiresScalarRoot) {
  Tape tape;
  const Var x = tape.variable(Matrix::Ones(2, 2));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Tape, SharedSubexpressionAccumulates) {
  Tape tape;
  const Var x = tape.variable(Matrix::Constant(1, 1, 3.0));
  const Var y = cwise_mul(x, x) + x;  // x^2 + x
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x)(0, 0), 7.0);
}

TEST(Ops, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  const Matrix at = random_matrix(3, 2, rng);
  expect_gradient_matches([](Tape&, const Var& x) { return sum(exp(x)); }, at);
  expect_gradient_matches([](Tape&, const Var& x) { return sum(sigmoid(x)); }, at);
  expect_gradient_matches([](Tape&, const Var& x) { return sum(log(add_constant(square(x), 1.0))); }, at);
  expect_gradient_matches([](Tape&, const Var& x) { return sum(sqrt(add_constant(square(x), 0.5))); }, at);
  expect_gradient_matches([](Tape&, const Var& x) { return sum(colwise_sum(cwise_mul(x, x))); }, at);
}

TEST(Ops, StructuralGradients) {
  std::mt19937_64 rng(2);
  const Matrix at = random_matrix(4, 3, rng);
  const Matrix other = random_matrix(3, 4, rng);
  expect_gradient_matches(
      [&](Tape& t, const Var& x) { return sum(square(x * t.constant(other))); }, at);
  expect_gradient_matches([](Tape&, const Var& x) { return sum(square(transpose(x) * x)); }, at);
  expect_gradient_matches(
      [](Tape&, const Var& x) { return sum(square(hcat({slice_cols(x, 2, 1), slice_rows(x, 0, 4)}))); }, at);
  expect_gradient_matches(
      [](Tape&, const Var& x) { return sum(square(add_rowwise(x, slice_rows(x, 1, 1)))); }, at);
  expect_gradient_matches(
      [](Tape&, const Var& x) { return sum(square(scale(x, slice_cols(slice_rows(x, 0, 1), 0, 1)))); }, at);
}

TEST(Ops, CholeskyGradient) {
  std::mt19937_64 rng(3);
  const Matrix a = spd(4, rng);
  const Matrix weights = random_matrix(4, 4, rng);
  // Symmetrize inside the function so that the perturbation stays symmetric.
  expect_gradient_matches(
      [&](Tape& t, const Var& x) {
        const Var sym = scale(x + transpose(x), 0.5);
        return sum(cwise_mul(cholesky(sym, 0.0), t.constant(weights)));
      },
      a);
}

TEST(Ops, TriangularSolveAndLogDetGradients) {
  std::mt19937_64 rng(4);
  const Matrix a = spd(3, rng);
  const Matrix b = random_matrix(3, 2, rng);
  expect_gradient_matches(
      [&](Tape& t, const Var& x) {
        const Var l = cholesky(scale(x + transpose(x), 0.5), 0.0);
        return sum(square(solve_lower(l, t.constant(b)))) + sum(square(solve_lower_transposed(l, t.constant(b)))) +
               sum_log_diag(l);
      },
      a);
  const Matrix l0 = Eigen::LLT<Matrix>(a).matrixL();
  expect_gradient_matches(
      [&](Tape& t, const Var& bb) { return sum(square(solve_lower(t.constant(l0), bb))); }, b);
}

TEST(Ops, SoftplusDiagonalFactor) {
  std::mt19937_64 rng(5);
  const Matrix raw = random_matrix(3, 3, rng);
  const Matrix l = lower_softplus_diag_value(raw);
  EXPECT_TRUE(l.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().isZero(0.0));
  EXPECT_GT(l.diagonal().minCoeff(), 0.0);
  expect_gradient_matches([](Tape&, const Var& x) { return sum(square(lower_softplus_diag(x))); }, raw);
  EXPECT_NEAR(softplus(softplus_inverse(0.1)), 0.1, 1e-15);
}

TEST(KernelOps, GramGradientsForEveryKind) {
  std::mt19937_64 rng(6);
  const Matrix a = random_matrix(4, 3, rng);
  const Matrix b = random_matrix(5, 3, rng);
  const Matrix w = random_matrix(4, 5, rng);
  for (KernelKind kind : {KernelKind::ArcCos1, KernelKind::Linear, KernelKind::Rbf}) {
    auto with_hyper = [&](Tape& t, const Var& hyper, const Var& x, const Var& y) {
      const KernelVars k{kind, slice_cols(hyper, 0, 1), slice_cols(hyper, 1, 1)};
      return sum(cwise_mul(gram(k, x, y), t.constant(w))) + sum(gram_diag(k, x));
    };
    const Matrix hyper = (Matrix(1, 2) << 0.3, -0.2).finished();
    expect_gradient_matches(
        [&](Tape& t, const Var& x) { return with_hyper(t, t.constant(hyper), x, t.constant(b)); }, a);
    expect_gradient_matches(
        [&](Tape& t, const Var& y) { return with_hyper(t, t.constant(hyper), t.constant(a), y); }, b);
    expect_gradient_matches(
        [&](Tape& t, const Var& hp) { return with_hyper(t, hp, t.constant(a), t.constant(b)); }, hyper);
  }
}

TEST(KernelOps, SymmetricGramGradient) {
  std::mt19937_64 rng(7);
  const Matrix a = random_matrix(4, 2, rng);
  const Matrix w = random_matrix(4, 4, rng);
  for (KernelKind kind : {KernelKind::ArcCos1, KernelKind::Rbf}) {
    expect_gradient_matches(
        [&](Tape& t, const Var& x) {
          const KernelVars k{kind, t.constant(0.1), t.constant(0.2)};
          return sum(cwise_mul(gram(k, x, x), t.constant(w)));
        },
        a);
  }
}

TEST(KernelOps, FeatureGradients) {
  std::mt19937_64 rng(8);
  const Matrix x = random_matrix(3, 3, rng);
  const Matrix hyper = (Matrix(1, 2) << 0.4, 0.1).finished();
  for (KernelKind kind : {KernelKind::ArcCos1, KernelKind::Linear, KernelKind::Rbf}) {
    const RandomFeatureMap map =
        RandomFeatureMap::draw(kind == KernelKind::Rbf ? KernelKind::Rbf : KernelKind::ArcCos1, 16, 3, rng);
    const Matrix w = random_matrix(3, kind == KernelKind::Linear ? 3 : 16, rng);
    auto f = [&](Tape& t, const Var& hp, const Var& in) {
      const KernelVars k{kind, slice_cols(hp, 0, 1), slice_cols(hp, 1, 1)};
      return sum(cwise_mul(kernel_features(map, k, in), t.constant(w)));
    };
    expect_gradient_matches([&](Tape& t, const Var& in) { return f(t, t.constant(hyper), in); }, x);
    expect_gradient_matches([&](Tape& t, const Var& hp) { return f(t, hp, t.constant(x)); }, hyper);
  }
}

}  // namespace
}  // namespace srudgp::ad
