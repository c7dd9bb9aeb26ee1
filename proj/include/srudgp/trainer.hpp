#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "srudgp/adam.hpp"
#include "srudgp/config.hpp"
#include "srudgp/harness.hpp"

namespace srudgp {

/// Everything needed to continue a run: parameters, optimizer moments and the
/// number of completed iterations.
struct TrainState {
  Model model;
  AdamState adam;
  long long iteration = 0;
};

struct FitCallbacks {
  std::function<void(long long iteration, const ElboBreakdown&)> on_iteration;
  std::function<void(const TrainState&)> on_checkpoint;
  // Called once before the first iteration of a fresh run, e.g. to replace
  // the random initialization by a pretrained one.
  std::function<void(Model&, const Dataset&)> pretrain;
};

/// Utterance visited at a global iteration: epoch e uses a permutation drawn
/// from (seed, e), so any iteration can be located without replaying earlier
/// ones.
inline std::size_t utterance_at(std::uint64_t seed, long long iteration, std::size_t count) {
  const auto epoch = static_cast<std::uint64_t>(iteration) / count;
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, kShuffleStream, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order[static_cast<std::size_t>(iteration) % count];
}

inline NoiseSource iteration_noise(std::uint64_t seed, long long iteration) {
  return NoiseSource(derive_seed(seed, kNoiseStream, static_cast<std::uint64_t>(iteration)));
}

/// Runs Adam ascent on the ELBO, one utterance per step, until
/// `model.config.iterations` steps have completed.
inline void fit(TrainState& state, const Dataset& train, const FitCallbacks& callbacks = {}) {
  if (train.utterances.empty()) throw ConfigError("training set is empty");
  Model& model = state.model;
  if (train.input_dim != model.input_dim() || train.output_dim != model.output_dim()) {
    throw ConfigError("training data widths do not match the model");
  }
  model.total_frames = train.total_frames();
  if (state.iteration == 0 && callbacks.pretrain) callbacks.pretrain(model, train);
  const ModelConfig& config = model.config;
  std::vector<ParamRef> params = parameters(model);
  while (state.iteration < config.iterations) {
    const long long it = state.iteration;
    const SequenceBatch& batch = train.utterances[utterance_at(config.seed, it, train.utterances.size())];
    NoiseSource noise = iteration_noise(config.seed, it);
    GradientTape tape;
    try {
      tape = grad(model, batch, config.objective, noise);
    } catch (const SingularityError& e) {
      throw SingularityError("iteration " + std::to_string(it) + ": " + e.what(), e.largest_jitter());
    } catch (const NumericalError& e) {
      throw NumericalError("iteration " + std::to_string(it) + ": " + e.what());
    }
    adam_step(params, tape, state.adam, config.adam);
    ++state.iteration;
    if (callbacks.on_iteration) callbacks.on_iteration(it, tape.elbo);
    if (callbacks.on_checkpoint && config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0) {
      callbacks.on_checkpoint(state);
    }
  }
}

inline TrainState start_training(const ModelConfig& config, const Dataset& train) {
  TrainState state;
  state.model = build_model(config, train.input_dim, train.output_dim);
  state.model.total_frames = train.total_frames();
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoints (JSON; doubles are written in shortest round-trip form, so a
// save/load cycle is bit-exact).

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline Json matrix_to_json(const Matrix& m) {
  std::vector<double> data(m.data(), m.data() + m.size());
  return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw ParseError("checkpoint matrix has inconsistent size", 0);
  }
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

inline Json vector_to_json(const Vector& v) { return matrix_to_json(v); }
inline Vector vector_from_json(const Json& j) { return matrix_from_json(j).col(0); }

inline Json svgp_to_json(const SvgpLayerParams& p) {
  Json cov = Json::array();
  for (const Matrix& raw : p.cov_raw) cov.push_back(matrix_to_json(raw));
  return Json{{"kernel", {{"kind", to_string(p.kernel.kind)}, {"scale", p.kernel.scale},
                          {"lengthscale", p.kernel.lengthscale}}},
              {"inducing", matrix_to_json(p.inducing)},
              {"mean", matrix_to_json(p.mean)},
              {"cov_raw", cov},
              {"features", {{"kind", to_string(p.features.kind)},
                            {"projection", matrix_to_json(p.features.projection)},
                            {"phase", vector_to_json(p.features.phase)}}}};
}

inline SvgpLayerParams svgp_from_json(const Json& j) {
  SvgpLayerParams p;
  p.kernel.kind = kernel_kind_from_string(j.at("kernel").at("kind").get<std::string>());
  p.kernel.scale = j.at("kernel").at("scale").get<double>();
  p.kernel.lengthscale = j.at("kernel").at("lengthscale").get<double>();
  p.inducing = matrix_from_json(j.at("inducing"));
  p.mean = matrix_from_json(j.at("mean"));
  for (const Json& raw : j.at("cov_raw")) p.cov_raw.push_back(matrix_from_json(raw));
  p.features.kind = kernel_kind_from_string(j.at("features").at("kind").get<std::string>());
  p.features.projection = matrix_from_json(j.at("features").at("projection"));
  p.features.phase = vector_from_json(j.at("features").at("phase"));
  return p;
}

inline Json layer_to_json(const Layer& layer) {
  if (const auto* ff = std::get_if<FeedForwardLayer>(&layer)) {
    return Json{{"kind", "ff"}, {"gp", svgp_to_json(ff->gp)}};
  }
  if (const auto* cell = std::get_if<SruDgpCellParams>(&layer)) {
    Json gps = Json::array();
    for (const SvgpLayerParams& gp : cell->gp) gps.push_back(svgp_to_json(gp));
    return Json{{"kind", "sru-dgp"},         {"gp", gps},
                {"v_f", vector_to_json(cell->v_forget)}, {"v_r", vector_to_json(cell->v_reset)},
                {"c0", vector_to_json(cell->c0)},        {"freeze_v", cell->freeze_v}};
  }
  const auto& s = std::get<SruCellParams>(layer);
  return Json{{"kind", "sru-nn"},
              {"W_f", matrix_to_json(s.w_forget)},  {"W_c", matrix_to_json(s.w_cell)},
              {"W_r", matrix_to_json(s.w_reset)},   {"W_h", matrix_to_json(s.w_highway)},
              {"b_f", vector_to_json(s.b_forget)},  {"b_c", vector_to_json(s.b_cell)},
              {"b_r", vector_to_json(s.b_reset)},   {"b_h", vector_to_json(s.b_highway)},
              {"v_f", vector_to_json(s.v_forget)},  {"v_r", vector_to_json(s.v_reset)},
              {"c0", vector_to_json(s.c0)}};
}

inline Layer layer_from_json(const Json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "ff") return FeedForwardLayer{svgp_from_json(j.at("gp"))};
  if (kind == "sru-dgp") {
    SruDgpCellParams cell;
    const Json& gps = j.at("gp");
    if (gps.size() != 4) throw ParseError("sru-dgp layer needs four GP functions", 0);
    for (std::size_t k = 0; k < 4; ++k) cell.gp[k] = svgp_from_json(gps[k]);
    cell.v_forget = vector_from_json(j.at("v_f"));
    cell.v_reset = vector_from_json(j.at("v_r"));
    cell.c0 = vector_from_json(j.at("c0"));
    cell.freeze_v = j.at("freeze_v").get<bool>();
    return cell;
  }
  if (kind == "sru-nn") {
    SruCellParams s;
    s.w_forget = matrix_from_json(j.at("W_f"));
    s.w_cell = matrix_from_json(j.at("W_c"));
    s.w_reset = matrix_from_json(j.at("W_r"));
    s.w_highway = matrix_from_json(j.at("W_h"));
    s.b_forget = vector_from_json(j.at("b_f"));
    s.b_cell = vector_from_json(j.at("b_c"));
    s.b_reset = vector_from_json(j.at("b_r"));
    s.b_highway = vector_from_json(j.at("b_h"));
    s.v_forget = vector_from_json(j.at("v_f"));
    s.v_reset = vector_from_json(j.at("v_r"));
    s.c0 = vector_from_json(j.at("c0"));
    return s;
  }
  throw ParseError("unknown layer kind '" + kind + "'", 0);
}

inline Json moments_to_json(const std::map<std::string, Matrix>& moments) {
  Json out = Json::object();
  for (const auto& [name, m] : moments) out[name] = matrix_to_json(m);
  return out;
}

inline std::map<std::string, Matrix> moments_from_json(const Json& j) {
  std::map<std::string, Matrix> out;
  for (const auto& [name, m] : j.items()) out[name] = matrix_from_json(m);
  return out;
}

}  // namespace detail

inline Json checkpoint_to_json(const TrainState& state) {
  Json layers = Json::array();
  for (const Layer& l : state.model.layers) layers.push_back(detail::layer_to_json(l));
  return Json{{"format", "srudgp-checkpoint"},
              {"version", kCheckpointVersion},
              {"library_version", SRUDGP_VERSION},
              {"config", to_json(state.model.config)},
              {"iteration", state.iteration},
              {"model",
               {{"total_frames", state.model.total_frames},
                {"log_noise", detail::matrix_to_json(state.model.log_noise)},
                {"jitter", state.model.options.jitter},
                {"variance_floor", state.model.options.variance_floor},
                {"layers", layers}}},
              {"adam",
               {{"step", state.adam.step},
                {"first", detail::moments_to_json(state.adam.first)},
                {"second", detail::moments_to_json(state.adam.second)}}}};
}

inline TrainState checkpoint_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != "srudgp-checkpoint") throw ParseError("not a checkpoint file", 0);
    if (j.at("version").get<int>() != kCheckpointVersion) throw ParseError("unsupported checkpoint version", 0);
    TrainState state;
    state.model.config = model_config_from_json(j.at("config"));
    state.iteration = j.at("iteration").get<long long>();
    const Json& m = j.at("model");
    state.model.total_frames = m.at("total_frames").get<double>();
    state.model.log_noise = detail::matrix_from_json(m.at("log_noise")).row(0);
    state.model.options.jitter = m.at("jitter").get<std::vector<double>>();
    state.model.options.variance_floor = m.at("variance_floor").get<double>();
    for (const Json& l : m.at("layers")) state.model.layers.push_back(detail::layer_from_json(l));
    const Json& a = j.at("adam");
    state.adam.step = a.at("step").get<long long>();
    state.adam.first = detail::moments_from_json(a.at("first"));
    state.adam.second = detail::moments_from_json(a.at("second"));
    state.model.validate();
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what(), 0);
  }
}

inline void save_checkpoint(const TrainState& state, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << checkpoint_to_json(state).dump() << '\n';
  out.flush();
  if (!out) throw IoError("failed while writing '" + path + "'");
}

inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what(), 0);
  }
  return checkpoint_from_json(j);
}

}  // namespace srudgp
