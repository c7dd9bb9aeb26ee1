#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "srudgp/exact_gp.hpp"
#include "srudgp/svgp.hpp"

namespace srudgp {
namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

SvgpLayerParams make_layer(KernelKind kind, Eigen::Index m, Eigen::Index d_in, Eigen::Index d_out,
                           Eigen::Index features, std::mt19937_64& rng) {
  return SvgpLayerParams::random_init({kind, 1.0, 1.0}, m, d_in, d_out, features, rng);
}

// Randomizes the variational parameters so tests are not run at the init point.
void perturb(SvgpLayerParams& p, std::mt19937_64& rng) {
  p.mean = random_matrix(p.mean.rows(), p.mean.cols(), rng);
  for (auto& raw : p.cov_raw) raw = 0.3 * random_matrix(raw.rows(), raw.cols(), rng);
}

TEST(Predict, PriorCollapseGivesZeroMeanAndPriorVariance) {
  std::mt19937_64 rng(1);
  for (KernelKind kind : {KernelKind::ArcCos1, KernelKind::Rbf, KernelKind::Linear}) {
    SvgpLayerParams p = make_layer(kind, 6, 3, 2, 32, rng);
    set_to_prior(p);
    const Matrix h = random_matrix(9, 3, rng);
    const PosteriorSequence post = predict(p, h, CovMode::Diag);
    EXPECT_LT(post.mean.cwiseAbs().maxCoeff(), 1e-12) << to_string(kind);
    const Vector prior = gram_diag(p.kernel, h);
    for (Eigen::Index d = 0; d < 2; ++d) {
      EXPECT_LT((post.variance.col(d) - prior).cwiseAbs().maxCoeff(), 1e-8) << to_string(kind);
    }
  }
}

TEST(Predict, ExactPosteriorCollapseMatchesFullGp) {
  std::mt19937_64 rng(2);
  const Kernel kernel{KernelKind::Rbf, 1.3, 0.8};
  const double noise = 0.05;
  Matrix x(5, 1);
  x << -1.6, -0.7, 0.1, 0.9, 1.8;
  Vector y = (2.0 * x.col(0)).array().sin();
  const ExactPosteriorAtInputs q = exact_posterior_at_inputs(x, y, kernel, noise);

  SvgpLayerParams p = make_layer(KernelKind::Rbf, 5, 1, 1, 16, rng);
  p.kernel = kernel;
  p.inducing = x;
  p.mean.col(0) = q.mean;
  p.set_cov_factor(0, Eigen::LLT<Matrix>(q.covariance).matrixL());

  const Matrix queries = (Matrix(7, 1) << -2.5, -1.6, -0.3, 0.1, 0.5, 1.2, 3.0).finished();
  const ExactGpResult exact = exact_gp_oracle(x, y, kernel, noise, queries);
  SvgpOptions options;
  options.jitter = {0.0};
  const PosteriorSequence post = predict(p, queries, CovMode::Diag, options);
  EXPECT_LT((post.mean.col(0) - exact.mean).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((post.variance.col(0) - exact.variance).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Predict, MeanIsLinearInVariationalMean) {
  std::mt19937_64 rng(3);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 7, 3, 2, 32, rng);
  perturb(p, rng);
  const Matrix h = random_matrix(11, 3, rng);
  const PosteriorSequence base = predict(p, h, CovMode::Diag);

  const Vector shift = random_matrix(7, 1, rng);
  SvgpLayerParams shifted = p;
  shifted.mean.col(1) += shift;
  const PosteriorSequence moved = predict(shifted, h, CovMode::Diag);

  const Matrix kzz = gram(p.kernel, p.inducing, p.inducing);
  const CholFactor f = cholesky_jittered(kzz, default_jitter_schedule());
  Matrix kzz_j = kzz;
  kzz_j.diagonal().array() += f.jitter;
  const Matrix interp = kzz_j.llt().solve(gram(p.kernel, p.inducing, h));
  EXPECT_LT((moved.mean.col(1) - base.mean.col(1) - interp.transpose() * shift).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(moved.mean.col(0), base.mean.col(0));
  EXPECT_EQ(moved.variance, base.variance);
}

TEST(Predict, NoneModeReturnsMeansOnly) {
  std::mt19937_64 rng(4);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 4, 2, 3, 16, rng);
  perturb(p, rng);
  const Matrix h = random_matrix(5, 2, rng);
  const PosteriorSequence none = predict(p, h, CovMode::None);
  EXPECT_EQ(none.mean, predict(p, h, CovMode::Diag).mean);
  EXPECT_EQ(none.variance.size(), 0);
  EXPECT_THROW(none.covariance(0), ContractError);
}

TEST(Predict, RejectsBadInput) {
  std::mt19937_64 rng(5);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 4, 2, 1, 16, rng);
  EXPECT_THROW(predict(p, random_matrix(3, 3, rng), CovMode::Diag), InputError);
  Matrix bad = random_matrix(3, 2, rng);
  bad(1, 1) = std::nan("");
  EXPECT_THROW(predict(p, bad, CovMode::Diag), DomainError);
}

TEST(Predict, SingularInducingGramReported) {
  std::mt19937_64 rng(6);
  SvgpLayerParams p = make_layer(KernelKind::Linear, 4, 2, 1, 16, rng);
  p.inducing.setZero();
  p.inducing.col(0).setOnes();  // identical inducing inputs: rank-one Gram
  SvgpOptions options;
  options.jitter = {0.0};
  EXPECT_THROW(predict(p, random_matrix(3, 2, rng), CovMode::Diag, options), SingularityError);
}

TEST(Predict, NystromDeflationBoundsVariance) {
  std::mt19937_64 rng(7);
  for (KernelKind kind : {KernelKind::ArcCos1, KernelKind::Rbf}) {
    SvgpLayerParams p = make_layer(kind, 8, 3, 1, 16, rng);
    p.set_cov_factor(0, 1e-12 * Matrix::Identity(8, 8));
    const Matrix h = random_matrix(20, 3, rng);
    const PosteriorSequence post = predict(p, h, CovMode::Diag);
    const Vector prior = gram_diag(p.kernel, h);
    EXPECT_TRUE(((post.variance.col(0) - prior).array() <= 1e-8).all());
    EXPECT_TRUE((post.variance.array() > 0.0).all());
  }
}

TEST(Predict, PermutationEquivariantOverFrames) {
  std::mt19937_64 rng(8);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 6, 3, 2, 16, rng);
  perturb(p, rng);
  const Matrix h = random_matrix(10, 3, rng);
  std::vector<int> order(10);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  Matrix permuted(10, 3);
  for (int i = 0; i < 10; ++i) permuted.row(i) = h.row(order[i]);
  const PosteriorSequence a = predict(p, h, CovMode::Diag);
  const PosteriorSequence b = predict(p, permuted, CovMode::Diag);
  for (int i = 0; i < 10; ++i) {
    EXPECT_LT((b.mean.row(i) - a.mean.row(order[i])).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((b.variance.row(i) - a.variance.row(order[i])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Predict, LowRankDiagonalApproachesExactDiagonal) {
  std::mt19937_64 rng(9);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 5, 3, 2, 4096, rng);
  perturb(p, rng);
  const Matrix h = random_matrix(30, 3, rng).rowwise().normalized();
  const PosteriorSequence diag = predict(p, h, CovMode::Diag);
  const PosteriorSequence low = predict(p, h, CovMode::LowRank);
  double gap = 0.0;
  for (Eigen::Index d = 0; d < 2; ++d) {
    gap += (low.covariance(d).diagonal() - diag.variance.col(d)).cwiseAbs().mean() / 2.0;
  }
  EXPECT_LT(gap, 0.05);
}

TEST(KlPenalty, ZeroAtPriorCollapse) {
  std::mt19937_64 rng(10);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 6, 3, 3, 16, rng);
  set_to_prior(p);
  EXPECT_NEAR(kl_penalty(p), 0.0, 1e-10);
}

TEST(KlPenalty, OneDimensionalClosedForm) {
  std::mt19937_64 rng(11);
  SvgpLayerParams p = make_layer(KernelKind::Rbf, 1, 1, 1, 16, rng);
  p.inducing.setZero();
  p.mean(0, 0) = 1.0;
  p.set_cov_factor(0, Matrix::Ones(1, 1));
  SvgpOptions options;
  options.jitter = {0.0};
  // 1/2 (S + m^2 - 1 - ln S) with k(z,z) = 1.
  EXPECT_NEAR(kl_penalty(p, options), 0.5, 1e-14);
}

TEST(KlPenalty, NonNegativeAtRandomParameters) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 25; ++trial) {
    SvgpLayerParams p = make_layer(trial % 2 ? KernelKind::Rbf : KernelKind::ArcCos1, 5, 2, 2, 16, rng);
    perturb(p, rng);
    EXPECT_GE(kl_penalty(p), 0.0);
  }
}

TEST(KlPenalty, AgreesWithMonteCarloEstimate) {
  std::mt19937_64 rng(13);
  SvgpLayerParams p = make_layer(KernelKind::Rbf, 3, 2, 1, 16, rng);
  perturb(p, rng);
  const Matrix kzz = gram(p.kernel, p.inducing, p.inducing);
  const CholFactor prior = cholesky_jittered(kzz, default_jitter_schedule());
  const Matrix lq = p.cov_factor(0);
  const Vector m = p.mean.col(0);
  // log q(u) - log p(u) for u = m + Lq e; the shared 2 pi terms cancel.
  const double log_det_ratio =
      prior.lower.diagonal().array().log().sum() - lq.diagonal().array().log().sum();
  std::normal_distribution<double> normal;
  const int n = 100000;
  double sum = 0.0;
  double sum_sq = 0.0;
  Vector e(3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) e(j) = normal(rng);
    const Vector u = m + lq * e;
    const Vector w = prior.lower.triangularView<Eigen::Lower>().solve(u);
    const double value = log_det_ratio - 0.5 * e.squaredNorm() + 0.5 * w.squaredNorm();
    sum += value;
    sum_sq += value * value;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum_sq / n - mean * mean) / n);
  EXPECT_NEAR(kl_penalty(p), mean, 3.0 * se);
}

TEST(SamplePosterior, ZeroNoiseReturnsMean) {
  std::mt19937_64 rng(14);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 4, 3, 2, 32, rng);
  perturb(p, rng);
  const Matrix h = random_matrix(6, 3, rng);
  const PosteriorSequence low = predict(p, h, CovMode::LowRank);
  EXPECT_EQ(sample_posterior(low, {Matrix::Zero(32, 2), Matrix::Zero(4, 2), {}}), low.mean);
  const PosteriorSequence diag = predict(p, h, CovMode::Diag);
  EXPECT_EQ(sample_posterior(diag, {{}, {}, Matrix::Zero(6, 2)}), diag.mean);
}

TEST(SamplePosterior, DiagArithmetic) {
  PosteriorSequence post;
  post.mode = CovMode::Diag;
  post.mean = (Matrix(2, 1) << 0.5, -1.0).finished();
  post.variance = (Matrix(2, 1) << 1.0, 4.0).finished();
  const Matrix s = sample_posterior(post, {{}, {}, Matrix::Ones(2, 1)});
  EXPECT_DOUBLE_EQ(s(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(s(1, 0), 1.0);
}

TEST(SamplePosterior, NoneModeIsContractError) {
  PosteriorSequence post;
  post.mean = Matrix::Zero(2, 1);
  EXPECT_THROW(sample_posterior(post, {}), ContractError);
}

TEST(SamplePosterior, EmpiricalCovarianceMatchesLowRankFactors) {
  std::mt19937_64 rng(15);
  SvgpLayerParams p = make_layer(KernelKind::ArcCos1, 4, 2, 1, 8, rng);
  perturb(p, rng);
  const Matrix h = random_matrix(3, 2, rng);
  const PosteriorSequence post = predict(p, h, CovMode::LowRank);
  const Matrix cov = post.covariance(0);
  const int n = 20000;
  std::normal_distribution<double> normal;
  Matrix samples(n, 3);
  PosteriorNoise noise{Matrix(8, 1), Matrix(4, 1), {}};
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < 8; ++j) noise.feature(j, 0) = normal(rng);
    for (Eigen::Index j = 0; j < 4; ++j) noise.inducing(j, 0) = normal(rng);
    samples.row(i) = (sample_posterior(post, noise) - post.mean).col(0).transpose();
  }
  const Matrix empirical = samples.transpose() * samples / n;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      const double se = std::sqrt((cov(a, a) * cov(b, b) + cov(a, b) * cov(a, b)) / n);
      EXPECT_NEAR(empirical(a, b), cov(a, b), 3.0 * se) << a << "," << b;
    }
  }
}

TEST(SamplePosterior, FusedTapeSampleMatchesFactorForm) {
  std::mt19937_64 rng(16);
  for (KernelKind kind : {KernelKind::ArcCos1, KernelKind::Rbf, KernelKind::Linear}) {
    SvgpLayerParams p = make_layer(kind, 5, 3, 2, 24, rng);
    perturb(p, rng);
    const Matrix h = random_matrix(7, 3, rng);
    const Eigen::Index feature_dim = kind == KernelKind::Linear ? 3 : 24;
    const PosteriorNoise noise{random_matrix(feature_dim, 2, rng), random_matrix(5, 2, rng), {}};
    const Matrix expected = sample_posterior(predict(p, h, CovMode::LowRank), noise);
    ad::Tape tape(false);
    const ad::SvgpVars v = ad::bind_constant(tape, p);
    const ad::Conditional c = ad::condition(v, tape.constant(h), {});
    const Matrix fused =
        ad::sample_lowrank(c, v, tape.constant(noise.feature), tape.constant(noise.inducing)).value();
    EXPECT_LT((fused - expected).cwiseAbs().maxCoeff(), 1e-10) << to_string(kind);
  }
}

}  // namespace
}  // namespace srudgp
