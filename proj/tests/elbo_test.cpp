#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "srudgp/elbo.hpp"
#include "srudgp/exact_gp.hpp"

namespace srudgp {
namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

SvgpLayerParams& gp_of(Model& model, std::size_t layer) { return std::get<FeedForwardLayer>(model.layers[layer]).gp; }

// One sparse GP layer whose inducing inputs sit on the data.
Model single_gp_model(const Matrix& x, const Kernel& kernel, double noise_var) {
  ModelConfig c;
  c.topology = {"ff"};
  c.inducing = static_cast<int>(x.rows());
  c.features = 16;
  c.kernel = kernel.kind;
  c.noise_var = noise_var;
  Model model = build_model(c, x.cols(), 1);
  gp_of(model, 0).kernel = kernel;
  gp_of(model, 0).inducing = x;
  model.total_frames = static_cast<double>(x.rows());
  model.options.jitter = {0.0, 1e-12, 1e-10};
  return model;
}

void randomize(Model& model, std::mt19937_64& rng, double sd = 0.5) {
  for (ParamRef& p : parameters(model)) {
    if (p.name == "log_noise") continue;
    const Matrix v = p.get();
    p.set(v + random_matrix(v.rows(), v.cols(), rng, sd));
  }
}

Model small_recurrent_model(std::uint64_t seed, bool freeze_v = true) {
  ModelConfig c;
  c.topology = {"sru-dgp", "ff"};
  c.hidden_width = 4;
  c.inducing = 8;
  c.features = 32;
  c.noise_var = 0.3;
  c.freeze_v = freeze_v;
  c.seed = seed;
  // Four input dimensions: the normalized arccos kernel only sees angles, and
  // eight inducing points on a 2-D circle give a nearly singular Gram matrix.
  Model model = build_model(c, 4, 2);
  model.total_frames = 40.0;
  std::mt19937_64 rng(seed + 100);
  randomize(model, rng, 0.3);
  return model;
}

SequenceBatch random_batch(Eigen::Index steps, Eigen::Index d_in, Eigen::Index d_out, std::mt19937_64& rng) {
  return {random_matrix(steps, d_in, rng), random_matrix(steps, d_out, rng), "u"};
}

TEST(Elbo, BreakdownIdentityHolds) {
  std::mt19937_64 rng(1);
  Model model = small_recurrent_model(1);
  for (int trial = 0; trial < 5; ++trial) {
    NoiseSource noise(trial);
    const ElboBreakdown e = elbo_utterance(model, random_batch(6, 4, 2, rng), noise);
    EXPECT_NEAR(e.total, e.loglik - e.kl_scale * e.kl_sum(), 1e-12 * std::max(1.0, std::abs(e.total)));
    EXPECT_EQ(e.kl_per_layer.size(), 2u);
    for (double kl : e.kl_per_layer) EXPECT_GE(kl, 0.0);
    EXPECT_DOUBLE_EQ(e.kl_scale, 6.0 / 40.0);
  }
}

TEST(Elbo, DoublingFrameCountHalvesKlScale) {
  std::mt19937_64 rng(2);
  Model model = small_recurrent_model(2);
  const SequenceBatch batch = random_batch(5, 4, 2, rng);
  NoiseSource a(7);
  const ElboBreakdown before = elbo_utterance(model, batch, a);
  model.total_frames *= 2.0;
  NoiseSource b(7);
  const ElboBreakdown after = elbo_utterance(model, batch, b);
  EXPECT_EQ(after.loglik, before.loglik);
  EXPECT_DOUBLE_EQ(after.kl_scale, 0.5 * before.kl_scale);
  EXPECT_NEAR(after.total - before.total, 0.5 * before.kl_scale * before.kl_sum(), 1e-12);
}

TEST(Elbo, SingleLayerBoundedByExactMarginalLikelihood) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = random_matrix(5, 1, rng);
    const Vector y = random_matrix(5, 1, rng);
    const Kernel kernel{KernelKind::Rbf, std::exp(random_matrix(1, 1, rng, 0.3)(0, 0)),
                        std::exp(random_matrix(1, 1, rng, 0.3)(0, 0))};
    const double noise_var = 0.05 + std::abs(random_matrix(1, 1, rng, 0.3)(0, 0));
    Model model = single_gp_model(x, kernel, noise_var);
    SvgpLayerParams& gp = gp_of(model, 0);
    gp.inducing = random_matrix(5, 1, rng);
    gp.mean = random_matrix(5, 1, rng);
    gp.cov_raw[0] = random_matrix(5, 5, rng, 0.3);
    const double exact = exact_gp_oracle(x, y, kernel, noise_var, Matrix(0, 1)).log_marginal_likelihood;
    for (Objective objective : {Objective::Utterance, Objective::Frame}) {
      NoiseSource noise(trial);
      const ElboBreakdown e = elbo(model, {x, y, "u"}, objective, noise);
      EXPECT_LE(e.total, exact + 1e-10) << "trial " << trial;
    }
  }
}

TEST(Elbo, TightAtExactPosteriorCollapse) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix x = random_matrix(5, 1, rng);
    const Vector y = (2.0 * x.col(0)).array().sin();
    const Kernel kernel{KernelKind::Rbf, 1.2, 0.9};
    const double noise_var = 0.1;
    Model model = single_gp_model(x, kernel, noise_var);
    const ExactPosteriorAtInputs q = exact_posterior_at_inputs(x, y, kernel, noise_var);
    gp_of(model, 0).mean.col(0) = q.mean;
    gp_of(model, 0).set_cov_factor(0, Eigen::LLT<Matrix>(q.covariance).matrixL());
    const double exact = exact_gp_oracle(x, y, kernel, noise_var, Matrix(0, 1)).log_marginal_likelihood;
    for (Objective objective : {Objective::Utterance, Objective::Frame}) {
      NoiseSource noise(1);
      const ElboBreakdown e = elbo(model, {x, y, "u"}, objective, noise);
      EXPECT_NEAR(e.total, exact, 1e-6);
    }
  }
}

TEST(Elbo, FrameAndUtteranceAgreeOnSingleFrame) {
  std::mt19937_64 rng(5);
  Model model = small_recurrent_model(5);
  const SequenceBatch batch = random_batch(1, 4, 2, rng);
  NoiseSource zero_a = NoiseSource::zeros();
  NoiseSource zero_b = NoiseSource::zeros();
  const ElboBreakdown u = elbo_utterance(model, batch, zero_a);
  const ElboBreakdown f = elbo_frame(model, batch, zero_b);
  EXPECT_NEAR(u.total, f.total, 1e-10);
  EXPECT_EQ(u.kl_scale, f.kl_scale);

  const Matrix x = random_matrix(1, 1, rng);
  Model single = single_gp_model(x, {KernelKind::Rbf, 1.0, 1.0}, 0.2);
  gp_of(single, 0).mean = random_matrix(1, 1, rng);
  NoiseSource a(3);
  NoiseSource b(3);
  const SequenceBatch one{x, random_matrix(1, 1, rng), "u"};
  EXPECT_NEAR(elbo_utterance(single, one, a).total, elbo_frame(single, one, b).total, 1e-10);
}

TEST(Elbo, MultipleSamplesAverageTheLogLikelihood) {
  std::mt19937_64 rng(6);
  Model model = small_recurrent_model(6);
  const SequenceBatch batch = random_batch(4, 4, 2, rng);
  for (Objective objective : {Objective::Frame, Objective::Utterance}) {
    model.config.samples = 1;
    NoiseSource shared(9);
    double mean_loglik = 0.0;
    ElboBreakdown single;
    for (int s = 0; s < 4; ++s) {
      single = elbo(model, batch, objective, shared);
      mean_loglik += single.loglik / 4.0;
    }
    model.config.samples = 4;
    NoiseSource fresh(9);
    const ElboBreakdown multi = elbo(model, batch, objective, fresh);
    EXPECT_NEAR(multi.loglik, mean_loglik, 1e-10);
    EXPECT_DOUBLE_EQ(multi.kl_scale, 4.0 * single.kl_scale);
    EXPECT_NEAR(multi.kl_sum(), single.kl_sum(), 1e-12);
  }
}

struct GradCheck {
  double max_relative_error = 0.0;
  std::string worst;
  int checked = 0;
};

// Central differences of the total ELBO for every entry of every trainable
// parameter, with the same noise seed on every evaluation.
GradCheck check_gradients(Model& model, const SequenceBatch& batch, Objective objective, std::uint64_t seed) {
  NoiseSource noise(seed);
  const GradientTape tape = grad(model, batch, objective, noise);
  const double h = 1e-5;
  GradCheck out;
  for (ParamRef& p : parameters(model)) {
    const Matrix base = p.get();
    const Matrix& analytic = tape.at(p.name);
    EXPECT_EQ(analytic.rows(), base.rows()) << p.name;
    for (Eigen::Index i = 0; i < base.size(); ++i) {
      if (p.name.find("S_raw") != std::string::npos && i / base.rows() > i % base.rows()) continue;
      Matrix shifted = base;
      shifted.data()[i] = base.data()[i] + h;
      p.set(shifted);
      NoiseSource np(seed);
      const double plus = elbo(model, batch, objective, np).total;
      shifted.data()[i] = base.data()[i] - h;
      p.set(shifted);
      NoiseSource nm(seed);
      const double minus = elbo(model, batch, objective, nm).total;
      p.set(base);
      const double fd = (plus - minus) / (2.0 * h);
      const double a = analytic.data()[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2});
      ++out.checked;
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

TEST(Grad, MatchesCentralDifferencesOnRecurrentModel) {
  std::mt19937_64 rng(7);
  Model model = small_recurrent_model(7);
  const SequenceBatch batch = random_batch(6, 4, 2, rng);
  const GradCheck check = check_gradients(model, batch, Objective::Utterance, 11);
  EXPECT_GT(check.checked, 500);
  EXPECT_LT(check.max_relative_error, 1e-4) << check.worst;
}

TEST(Grad, MatchesCentralDifferencesForFrameObjectiveAndRbf) {
  std::mt19937_64 rng(8);
  ModelConfig c;
  c.topology = {"ff", "ff"};
  c.kernel = KernelKind::Rbf;
  c.hidden_width = 2;
  c.inducing = 5;
  c.features = 16;
  c.noise_per_dim = true;
  c.seed = 8;
  Model model = build_model(c, 2, 2);
  randomize(model, rng, 0.3);
  const GradCheck check = check_gradients(model, random_batch(6, 2, 2, rng), Objective::Frame, 3);
  EXPECT_LT(check.max_relative_error, 1e-4) << check.worst;
}

TEST(Grad, UnfrozenGateVectorsAreDifferentiated) {
  std::mt19937_64 rng(9);
  Model frozen = small_recurrent_model(9, true);
  Model open = small_recurrent_model(9, false);
  const SequenceBatch batch = random_batch(6, 4, 2, rng);
  NoiseSource a(1);
  NoiseSource b(1);
  const GradientTape g_frozen = grad(frozen, batch, Objective::Utterance, a);
  const GradientTape g_open = grad(open, batch, Objective::Utterance, b);
  EXPECT_THROW(g_frozen.at("layer0.v_f"), ContractError);
  EXPECT_EQ(g_open.at("layer0.v_f").cols(), 4);
  EXPECT_EQ(g_open.gradients.size(), g_frozen.gradients.size() + 2);
  const GradCheck check = check_gradients(open, batch, Objective::Utterance, 1);
  EXPECT_LT(check.max_relative_error, 1e-4) << check.worst;
}

TEST(Grad, EveryParameterAppearsOnce) {
  Model model = small_recurrent_model(10);
  std::mt19937_64 rng(10);
  NoiseSource noise(2);
  const GradientTape tape = grad(model, random_batch(3, 4, 2, rng), Objective::Utterance, noise);
  std::vector<std::string> names;
  for (const auto& [name, g] : tape.gradients) {
    names.push_back(name);
    EXPECT_TRUE(g.allFinite()) << name;
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
  EXPECT_EQ(names.size(), parameters(model).size());
}

TEST(Grad, KlScaleEntersGradientLinearly) {
  std::mt19937_64 rng(11);
  Model model = small_recurrent_model(11);
  const SequenceBatch batch = random_batch(4, 4, 2, rng);
  NoiseSource a(5);
  const GradientTape g1 = grad(model, batch, Objective::Utterance, a);
  model.total_frames *= 2.0;
  NoiseSource b(5);
  const GradientTape g2 = grad(model, batch, Objective::Utterance, b);
  // g1 - g2 = -(kl_scale / 2) dKL / dtheta; check on the top layer mean
  // against a finite difference of its KL alone.
  SvgpLayerParams& top = gp_of(model, 1);
  const Matrix diff = g1.at("layer1.m") - g2.at("layer1.m");
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < top.mean.size(); ++i) {
    const double base = top.mean.data()[i];
    top.mean.data()[i] = base + h;
    const double plus = kl_penalty(top, model.options);
    top.mean.data()[i] = base - h;
    const double minus = kl_penalty(top, model.options);
    top.mean.data()[i] = base;
    const double dkl = (plus - minus) / (2.0 * h);
    EXPECT_NEAR(diff.data()[i], -0.5 * g1.elbo.kl_scale * dkl, 1e-7);
  }
}

TEST(Grad, NoiseVarianceDerivativeAtPerfectFit) {
  ModelConfig c;
  c.arch = Arch::SruNn;
  c.layers = 2;
  c.hidden_width = 4;
  c.noise_var = 0.37;
  Model model = build_model(c, 3, 2);
  std::mt19937_64 rng(12);
  const Matrix x = random_matrix(7, 3, rng);
  const SequenceBatch batch{x, generate(model, x), "u"};
  NoiseSource noise(0);
  const GradientTape tape = grad(model, batch, Objective::Utterance, noise);
  // d/dsigma2 of -(T D / 2) log(2 pi sigma2) is -T D / (2 sigma2); the tape
  // holds the derivative with respect to log sigma2.
  const double sigma2 = model.noise_var()(0);
  EXPECT_NEAR(tape.at("log_noise")(0, 0) / sigma2, -7.0 * 2.0 / (2.0 * sigma2), 1e-10);
  EXPECT_NEAR(tape.elbo.loglik, -0.5 * 7.0 * 2.0 * std::log(2.0 * std::numbers::pi * sigma2), 1e-10);
}

TEST(Generate, DeterministicAndEqualToZeroNoiseSampling) {
  std::mt19937_64 rng(13);
  Model model = small_recurrent_model(13);
  const Matrix x = random_matrix(9, 4, rng);
  const Matrix first = generate(model, x);
  EXPECT_TRUE(first == generate(model, x));
  NoiseSource zero = NoiseSource::zeros();
  EXPECT_TRUE(first == stack_forward(model.layers, x, StackMode::SampleUtterance, zero).outputs.back());
}

TEST(Generate, CollapseModelReproducesExactPosteriorMean) {
  std::mt19937_64 rng(14);
  const Matrix x = random_matrix(6, 1, rng);
  const Vector y = x.col(0).array().cos();
  const Kernel kernel{KernelKind::Rbf, 1.0, 0.7};
  Model model = single_gp_model(x, kernel, 0.05);
  const ExactPosteriorAtInputs q = exact_posterior_at_inputs(x, y, kernel, 0.05);
  gp_of(model, 0).mean.col(0) = q.mean;
  const Matrix queries = random_matrix(10, 1, rng);
  const ExactGpResult exact = exact_gp_oracle(x, y, kernel, 0.05, queries);
  EXPECT_LT((generate(model, queries).col(0) - exact.mean).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Elbo, RejectsMismatchedBatch) {
  Model model = small_recurrent_model(15);
  NoiseSource noise(0);
  EXPECT_THROW(elbo_utterance(model, {Matrix::Ones(3, 3), Matrix::Ones(3, 2), "u"}, noise), InputError);
  EXPECT_THROW(elbo_utterance(model, {Matrix::Ones(3, 4), Matrix::Ones(2, 2), "u"}, noise), InputError);
}

}  // namespace
}  // namespace srudgp
