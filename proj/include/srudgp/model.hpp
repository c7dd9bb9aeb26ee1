#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "srudgp/recurrent.hpp"

namespace srudgp {

enum class Arch { FfDgp, SruDgp, SruNn };

inline std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::FfDgp: return "ff-dgp";
    case Arch::SruDgp: return "sru-dgp";
    case Arch::SruNn: return "sru-nn";
  }
  return "?";
}

inline Arch arch_from_string(std::string_view name) {
  if (name == "ff-dgp") return Arch::FfDgp;
  if (name == "sru-dgp") return Arch::SruDgp;
  if (name == "sru-nn") return Arch::SruNn;
  throw ConfigError("unknown arch '" + std::string(name) + "'");
}

/// Utterance: one correlated draw per GP function over the whole sequence.
/// Frame: independent draws per frame from the diagonal covariance.
enum class Objective { Utterance, Frame };

inline std::string_view to_string(Objective o) { return o == Objective::Utterance ? "utterance" : "frame"; }

inline Objective objective_from_string(std::string_view name) {
  if (name == "utterance") return Objective::Utterance;
  if (name == "frame") return Objective::Frame;
  throw ConfigError("unknown objective '" + std::string(name) + "'");
}

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ModelConfig {
  Arch arch = Arch::SruDgp;
  int layers = 3;
  // Explicit layer kinds ("ff", "sru-dgp", "sru-nn"); overrides arch/layers
  // when nonempty.
  std::vector<std::string> topology;
  int hidden_width = 16;
  int inducing = 64;
  int features = 1024;
  KernelKind kernel = KernelKind::ArcCos1;
  double noise_var = 0.1;      // initial likelihood variance
  bool noise_per_dim = false;  // one variance per output dimension
  int samples = 1;             // S
  Objective objective = Objective::Utterance;
  bool freeze_v = true;
  AdamConfig adam;
  int iterations = 500;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints

  /// Full-scale sizes: 256 hidden units, 1024 inducing points.
  static ModelConfig full_scale() {
    ModelConfig c;
    c.hidden_width = 256;
    c.inducing = 1024;
    return c;
  }

  /// Small sizes for tests and laptop-scale runs.
  static ModelConfig desk() {
    ModelConfig c;
    c.features = 256;
    c.iterations = 1500;
    return c;
  }

  static Objective default_objective(Arch arch) { return arch == Arch::FfDgp ? Objective::Frame : Objective::Utterance; }

  std::vector<std::string> resolved_topology() const {
    if (!topology.empty()) return topology;
    std::vector<std::string> kinds;
    switch (arch) {
      case Arch::FfDgp:
        kinds.assign(static_cast<std::size_t>(layers), "ff");
        break;
      case Arch::SruDgp:
        kinds.push_back("ff");
        for (int i = 0; i < layers - 2; ++i) kinds.push_back("sru-dgp");
        kinds.push_back("ff");
        break;
      case Arch::SruNn:
        kinds.assign(static_cast<std::size_t>(layers), "sru-nn");
        break;
    }
    return kinds;
  }

  void validate() const {
    if (topology.empty()) {
      const int min_layers = arch == Arch::SruDgp ? 2 : 1;
      if (layers < min_layers) throw ConfigError("layers must be at least " + std::to_string(min_layers));
    }
    for (const std::string& kind : topology) {
      if (kind != "ff" && kind != "sru-dgp" && kind != "sru-nn") {
        throw ConfigError("topology: unknown layer kind '" + kind + "'");
      }
    }
    if (hidden_width < 1) throw ConfigError("hidden_width must be at least 1");
    if (inducing < 1) throw ConfigError("inducing must be at least 1");
    if (features < 1) throw ConfigError("features must be at least 1");
    if (samples < 1) throw ConfigError("samples must be at least 1");
    if (!(noise_var > 0.0)) throw ConfigError("noise_var must be positive");
    if (!(adam.lr > 0.0)) throw ConfigError("adam.lr must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("adam.beta1 must lie in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("adam.beta2 must lie in [0, 1)");
    if (!(adam.eps >= 0.0)) throw ConfigError("adam.eps must be non-negative");
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  }
};

/// splitmix64 mixing of (seed, stream, index) into an independent seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

enum SeedStream : std::uint64_t { kInitStream = 1, kShuffleStream = 2, kNoiseStream = 3, kDataStream = 4 };

struct Model {
  ModelConfig config;
  std::vector<Layer> layers;
  RowVector log_noise;          // 1 x 1 or 1 x D_out
  double total_frames = 1.0;    // N in the KL scale
  SvgpOptions options;

  Eigen::Index input_dim() const { return layer_input_dim(layers.front()); }
  Eigen::Index output_dim() const { return layer_output_dim(layers.back()); }
  RowVector noise_var() const { return log_noise.array().exp(); }

  void validate() const {
    validate_stack(layers);
    if (log_noise.size() != 1 && log_noise.size() != output_dim()) {
      throw ConfigError("likelihood variance must be shared or per output dimension");
    }
    if (!log_noise.allFinite()) throw DomainError("likelihood variance must be finite and positive");
    if (!(total_frames > 0.0)) throw ConfigError("total training frame count must be positive");
  }

  int gp_calls_per_utterance() const {
    int calls = 0;
    for (const Layer& l : layers) {
      if (std::holds_alternative<FeedForwardLayer>(l)) calls += 1;
      if (std::holds_alternative<SruDgpCellParams>(l)) calls += 4;
    }
    return calls;
  }
};

/// Builds a randomly initialized model. Widths are checked before any
/// parameter is drawn.
inline Model build_model(const ModelConfig& config, Eigen::Index input_dim, Eigen::Index output_dim) {
  config.validate();
  if (input_dim < 1 || output_dim < 1) throw ConfigError("input and output widths must be positive");
  const std::vector<std::string> kinds = config.resolved_topology();
  if (kinds.empty()) throw ConfigError("model needs at least one layer");
  const Kernel kernel{config.kernel, 1.0, 1.0};
  std::mt19937_64 rng(derive_seed(config.seed, kInitStream));
  Model model;
  model.config = config;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const Eigen::Index in = i == 0 ? input_dim : config.hidden_width;
    const Eigen::Index out = i + 1 == kinds.size() ? output_dim : config.hidden_width;
    if (kinds[i] == "ff") {
      model.layers.push_back(
          FeedForwardLayer{SvgpLayerParams::random_init(kernel, config.inducing, in, out, config.features, rng)});
    } else if (kinds[i] == "sru-dgp") {
      SruDgpCellParams cell =
          SruDgpCellParams::random_init(kernel, config.inducing, in, out, config.features, rng);
      cell.freeze_v = config.freeze_v;
      model.layers.push_back(std::move(cell));
    } else {
      model.layers.push_back(SruCellParams::random_init(in, out, rng));
    }
  }
  model.log_noise = RowVector::Constant(config.noise_per_dim ? output_dim : 1, std::log(config.noise_var));
  model.validate();
  return model;
}

/// Handle to one trainable parameter in its unconstrained form: log for
/// kernel hyperparameters and the likelihood variance, raw factor entries for
/// the variational covariance.
struct ParamRef {
  std::string name;
  std::function<Matrix()> get;
  std::function<void(const Matrix&)> set;
};

namespace detail {

inline void register_svgp(std::vector<ParamRef>& out, SvgpLayerParams& p, const std::string& prefix) {
  out.push_back({prefix + ".Z", [&p] { return p.inducing; }, [&p](const Matrix& v) { p.inducing = v; }});
  out.push_back({prefix + ".m", [&p] { return p.mean; }, [&p](const Matrix& v) { p.mean = v; }});
  for (std::size_t d = 0; d < p.cov_raw.size(); ++d) {
    out.push_back({prefix + ".S_raw" + std::to_string(d), [&p, d] { return p.cov_raw[d]; },
                   [&p, d](const Matrix& v) { p.cov_raw[d] = v.triangularView<Eigen::Lower>(); }});
  }
  out.push_back({prefix + ".log_scale", [&p] { return Matrix::Constant(1, 1, std::log(p.kernel.scale)); },
                 [&p](const Matrix& v) { p.kernel.scale = std::exp(v(0, 0)); }});
  if (p.kernel.kind == KernelKind::Rbf) {
    out.push_back({prefix + ".log_lengthscale",
                   [&p] { return Matrix::Constant(1, 1, std::log(p.kernel.lengthscale)); },
                   [&p](const Matrix& v) { p.kernel.lengthscale = std::exp(v(0, 0)); }});
  }
}

inline void register_row(std::vector<ParamRef>& out, Vector& v, const std::string& name) {
  out.push_back({name, [&v] { return Matrix(v.transpose()); }, [&v](const Matrix& m) { v = m.transpose(); }});
}

inline void register_matrix(std::vector<ParamRef>& out, Matrix& m, const std::string& name) {
  out.push_back({name, [&m] { return m; }, [&m](const Matrix& v) { m = v; }});
}

}  // namespace detail

/// Every trainable parameter of the model, in a fixed order. Names match the
/// ones used when the objective is put on a tape. Frozen v vectors are left
/// out. The references stay valid while `model.layers` is not resized.
inline std::vector<ParamRef> parameters(Model& model) {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    if (auto* ff = std::get_if<FeedForwardLayer>(&model.layers[i])) {
      detail::register_svgp(out, ff->gp, prefix);
    } else if (auto* cell = std::get_if<SruDgpCellParams>(&model.layers[i])) {
      for (std::size_t k = 0; k < 4; ++k) detail::register_svgp(out, cell->gp[k], prefix + "." + kGateNames[k]);
      if (!cell->freeze_v) {
        detail::register_row(out, cell->v_forget, prefix + ".v_f");
        detail::register_row(out, cell->v_reset, prefix + ".v_r");
      }
    } else {
      auto& sru = std::get<SruCellParams>(model.layers[i]);
      detail::register_matrix(out, sru.w_forget, prefix + ".W_f");
      detail::register_matrix(out, sru.w_cell, prefix + ".W_c");
      detail::register_matrix(out, sru.w_reset, prefix + ".W_r");
      detail::register_matrix(out, sru.w_highway, prefix + ".W_h");
      detail::register_row(out, sru.b_forget, prefix + ".b_f");
      detail::register_row(out, sru.b_cell, prefix + ".b_c");
      detail::register_row(out, sru.b_reset, prefix + ".b_r");
      detail::register_row(out, sru.b_highway, prefix + ".b_h");
      if (!model.config.freeze_v) {
        detail::register_row(out, sru.v_forget, prefix + ".v_f");
        detail::register_row(out, sru.v_reset, prefix + ".v_r");
      }
    }
  }
  out.push_back({"log_noise", [&model] { return Matrix(model.log_noise); },
                 [&model](const Matrix& v) { model.log_noise = v; }});
  return out;
}

/// Draws every variational mean from N(0, sd^2). Mean propagation through a
/// freshly initialized model (m = 0) reaches the origin of the next layer,
/// where the normalized arccos kernel is undefined; benchmarks of untrained
/// models use this instead.
inline void randomize_means(Model& model, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sd);
  auto fill = [&](SvgpLayerParams& gp) {
    for (Eigen::Index i = 0; i < gp.mean.size(); ++i) gp.mean.data()[i] = normal(rng);
  };
  for (Layer& layer : model.layers) {
    if (auto* ff = std::get_if<FeedForwardLayer>(&layer)) fill(ff->gp);
    if (auto* cell = std::get_if<SruDgpCellParams>(&layer)) {
      for (SvgpLayerParams& gp : cell->gp) fill(gp);
    }
  }
}

inline std::unordered_set<std::string> trainable_names(Model& model) {
  std::unordered_set<std::string> names;
  for (const ParamRef& p : parameters(model)) names.insert(p.name);
  return names;
}

}  // namespace srudgp
