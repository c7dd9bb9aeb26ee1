#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "srudgp/elbo.hpp"

namespace srudgp {

enum class TaskKind { StaticNonlinear, LaggedCopy, SmoothTrajectory };

inline std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::StaticNonlinear: return "static-nonlinear";
    case TaskKind::LaggedCopy: return "lagged-copy";
    case TaskKind::SmoothTrajectory: return "smooth-trajectory";
  }
  return "?";
}

inline TaskKind task_kind_from_string(std::string_view name) {
  if (name == "static-nonlinear") return TaskKind::StaticNonlinear;
  if (name == "lagged-copy") return TaskKind::LaggedCopy;
  if (name == "smooth-trajectory") return TaskKind::SmoothTrajectory;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

/// Synthetic task description. The last input column is a constant 1; the
/// other D_in - 1 columns are independent stationary AR(1) processes with unit
/// variance: x_t = rho x_{t-1} + sqrt(1 - rho^2) e_t, e_t ~ N(0, I).
struct TaskSpec {
  TaskKind kind = TaskKind::LaggedCopy;
  std::uint64_t seed = 0;
  int utterances = 64;
  int frames = 50;
  int input_dim = 3;
  int output_dim = 2;
  double noise_sd = 0.05;
  int lag = 3;             // lagged-copy only
  double smoothing = 0.8;  // smooth-trajectory only
  double input_correlation = 0.7;

  void validate() const {
    if (utterances < 1) throw ConfigError("data.utterances must be at least 1");
    if (frames < 1) throw ConfigError("data.frames must be at least 1");
    if (input_dim < 2) throw ConfigError("data.input_dim must be at least 2 (one column is the constant)");
    if (output_dim < 1) throw ConfigError("data.output_dim must be at least 1");
    if (!(noise_sd >= 0.0)) throw ConfigError("data.noise_sd must be non-negative");
    if (lag < 1) throw ConfigError("data.lag must be at least 1");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("data.smoothing must lie in [0, 1)");
    if (!(input_correlation >= 0.0 && input_correlation < 1.0)) {
      throw ConfigError("data.input_correlation must lie in [0, 1)");
    }
  }
};

struct Dataset {
  std::vector<SequenceBatch> utterances;
  Eigen::Index input_dim = 0;
  Eigen::Index output_dim = 0;
  std::string split = "train";
  std::string generator = "none";
  std::uint64_t seed = 0;

  double total_frames() const {
    double n = 0.0;
    for (const SequenceBatch& u : utterances) n += static_cast<double>(u.frames());
    return n;
  }

  void validate() const {
    for (const SequenceBatch& u : utterances) {
      if (u.frames() < 1) throw ConfigError("utterance '" + u.id + "' has no frames");
      if (u.inputs.cols() != input_dim || u.targets.cols() != output_dim || u.targets.rows() != u.frames()) {
        throw ConfigError("utterance '" + u.id + "' does not match the dataset widths");
      }
    }
  }
};

/// Frozen coefficients of a task: y_d depends on x through a_d^T x where a_d
/// is row d of `projection` (D_out x (D_in - 1), entries N(0, 1 / (D_in - 1))).
struct TaskFunction {
  Matrix projection;

  /// g(x)_d = sin(a_d^T x) on the non-constant input columns.
  RowVector operator()(const RowVector& x) const {
    return (projection * x.head(projection.cols()).transpose()).array().sin().transpose();
  }
};

inline TaskFunction task_function(const TaskSpec& spec) {
  std::mt19937_64 rng(derive_seed(spec.seed, kDataStream, 0));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(spec.input_dim - 1)));
  TaskFunction f;
  f.projection.resize(spec.output_dim, spec.input_dim - 1);
  for (Eigen::Index i = 0; i < f.projection.size(); ++i) f.projection.data()[i] = normal(rng);
  return f;
}

inline int split_index(const std::string& split) {
  if (split == "train") return 0;
  if (split == "dev") return 1;
  if (split == "test") return 2;
  throw ConfigError("unknown split '" + split + "'");
}

/// Generates one split. Targets before observation noise:
///   static-nonlinear:  y_t = g(x_t)
///   lagged-copy:       y_t = g(x_{t-k})
///   smooth-trajectory: y_t = a y_{t-1} + (1 - a) g(x_t), y_{-1} = 0
/// then y += noise_sd * N(0, I). Lagged-copy draws k unobserved frames before
/// t = 0 so every target has a source frame. The task function is shared by
/// all splits of a seed; the sequences differ per split.
inline Dataset gen_task(const TaskSpec& spec, const std::string& split = "train") {
  spec.validate();
  const TaskFunction g = task_function(spec);
  std::mt19937_64 rng(derive_seed(spec.seed, kDataStream, 1 + static_cast<std::uint64_t>(split_index(split))));
  std::normal_distribution<double> normal;
  const double rho = spec.input_correlation;
  const double innovation = std::sqrt(1.0 - rho * rho);
  const int preroll = spec.kind == TaskKind::LaggedCopy ? spec.lag : 0;
  const Eigen::Index signal_dim = spec.input_dim - 1;
  Dataset data;
  data.input_dim = spec.input_dim;
  data.output_dim = spec.output_dim;
  data.split = split;
  data.generator = std::string(to_string(spec.kind));
  data.seed = spec.seed;
  for (int u = 0; u < spec.utterances; ++u) {
    Matrix x(preroll + spec.frames, signal_dim);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      for (Eigen::Index j = 0; j < signal_dim; ++j) {
        x(t, j) = t == 0 ? normal(rng) : rho * x(t - 1, j) + innovation * normal(rng);
      }
    }
    SequenceBatch b;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%04d", split.c_str(), u);
    b.id = id;
    b.inputs.resize(spec.frames, spec.input_dim);
    b.inputs.leftCols(signal_dim) = x.bottomRows(spec.frames);
    b.inputs.col(signal_dim).setOnes();
    b.targets.resize(spec.frames, spec.output_dim);
    RowVector state = RowVector::Zero(spec.output_dim);
    for (Eigen::Index t = 0; t < spec.frames; ++t) {
      switch (spec.kind) {
        case TaskKind::StaticNonlinear:
          b.targets.row(t) = g(b.inputs.row(t));
          break;
        case TaskKind::LaggedCopy:
          b.targets.row(t) = g(x.row(t));
          break;
        case TaskKind::SmoothTrajectory:
          state = spec.smoothing * state + (1.0 - spec.smoothing) * g(b.inputs.row(t));
          b.targets.row(t) = state;
          break;
      }
    }
    if (spec.noise_sd > 0.0) {
      for (Eigen::Index i = 0; i < b.targets.size(); ++i) b.targets.data()[i] += spec.noise_sd * normal(rng);
    }
    data.utterances.push_back(std::move(b));
  }
  return data;
}

/// Best RMSE any predictor that sees only x_t can reach on lagged-copy. With
/// s = |a_d|^2 and q = rho^(2k), z = a_d^T x_{t-k} given x_t is normal with
/// mean mu ~ N(0, q s) and variance (1 - q) s, so the optimum E[sin z | x_t]
/// leaves
///   MSE_d = (1 - exp(-2 s)) / 2 - (1 - exp(-2 q s)) exp(-(1 - q) s) / 2
/// and the floor is sqrt(mean_d MSE_d + noise_sd^2).
inline double lagged_copy_floor(const TaskSpec& spec) {
  if (spec.kind != TaskKind::LaggedCopy) throw ConfigError("lagged_copy_floor: task is not lagged-copy");
  const TaskFunction g = task_function(spec);
  const double q = std::pow(spec.input_correlation, 2.0 * spec.lag);
  double mse = 0.0;
  for (Eigen::Index d = 0; d < g.projection.rows(); ++d) {
    const double s = g.projection.row(d).squaredNorm();
    mse += 0.5 * (1.0 - std::exp(-2.0 * s)) - 0.5 * (1.0 - std::exp(-2.0 * q * s)) * std::exp(-(1.0 - q) * s);
  }
  mse /= static_cast<double>(g.projection.rows());
  return std::sqrt(mse + spec.noise_sd * spec.noise_sd);
}

// ---------------------------------------------------------------------------
// Dataset files

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view text, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError("invalid number '" + std::string(text) + "'", line);
  }
  return v;
}

inline long long parse_int(std::string_view text, std::size_t line) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError("invalid integer '" + std::string(text) + "'", line);
  }
  return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

inline constexpr std::string_view kDatasetMagic = "# srudgp-dataset 1";

/// Text format:
///   # srudgp-dataset 1
///   split <name> / generator <kind> / seed <n> / input_dim <n> / output_dim <n>
///   utterances <n> / total_frames <n>  (one key per line)
///   id,t,x_1..x_Din,y_1..y_Dout        (one frame per line)
inline void save_dataset(const Dataset& data, const std::string& path) {
  if (data.utterances.empty()) throw ConfigError("cannot save a dataset with no utterances");
  data.validate();
  for (const SequenceBatch& u : data.utterances) {
    if (u.id.empty() || u.id.find_first_of(", \n") != std::string::npos) {
      throw ConfigError("utterance id '" + u.id + "' must be nonempty without commas or spaces");
    }
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  long long frames = 0;
  for (const SequenceBatch& u : data.utterances) frames += u.frames();
  out << kDatasetMagic << '\n'
      << "split " << data.split << '\n'
      << "generator " << data.generator << '\n'
      << "seed " << data.seed << '\n'
      << "input_dim " << data.input_dim << '\n'
      << "output_dim " << data.output_dim << '\n'
      << "utterances " << data.utterances.size() << '\n'
      << "total_frames " << frames << '\n';
  for (const SequenceBatch& u : data.utterances) {
    for (Eigen::Index t = 0; t < u.frames(); ++t) {
      out << u.id << ',' << t;
      for (Eigen::Index j = 0; j < data.input_dim; ++j) out << ',' << detail::format_double(u.inputs(t, j));
      for (Eigen::Index j = 0; j < data.output_dim; ++j) out << ',' << detail::format_double(u.targets(t, j));
      out << '\n';
    }
  }
  out.flush();
  if (!out) throw IoError("failed while writing '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++line_no;
    return true;
  };
  if (!next() || line != kDatasetMagic) throw ParseError("missing dataset header", line_no == 0 ? 1 : line_no);

  Dataset data;
  long long utterances = -1;
  long long frames = -1;
  const std::vector<std::string> keys{"split", "generator", "seed", "input_dim", "output_dim", "utterances", "total_frames"};
  for (const std::string& key : keys) {
    if (!next()) throw ParseError("truncated header, expected '" + key + "'", line_no + 1);
    const std::size_t space = line.find(' ');
    if (space == std::string::npos || line.substr(0, space) != key) {
      throw ParseError("expected header key '" + key + "'", line_no);
    }
    const std::string value = line.substr(space + 1);
    if (key == "split") data.split = value;
    if (key == "generator") data.generator = value;
    if (key == "seed") data.seed = static_cast<std::uint64_t>(detail::parse_int(value, line_no));
    if (key == "input_dim") data.input_dim = detail::parse_int(value, line_no);
    if (key == "output_dim") data.output_dim = detail::parse_int(value, line_no);
    if (key == "utterances") utterances = detail::parse_int(value, line_no);
    if (key == "total_frames") frames = detail::parse_int(value, line_no);
  }
  if (data.input_dim < 1 || data.output_dim < 1) throw ParseError("dimensions must be positive", line_no);
  if (utterances < 1 || frames < 1) throw ParseError("header declares an empty dataset", line_no);

  const std::size_t width = static_cast<std::size_t>(2 + data.input_dim + data.output_dim);
  std::vector<std::string> ids;
  std::vector<std::vector<std::vector<double>>> xs;
  std::vector<std::vector<std::vector<double>>> ys;
  long long read = 0;
  while (next()) {
    if (line.empty()) continue;
    const std::vector<std::string_view> fields = detail::split_fields(line, ',');
    if (fields.size() != width) {
      throw ParseError("expected " + std::to_string(width) + " fields, found " + std::to_string(fields.size()),
                       line_no);
    }
    const std::string id(fields[0]);
    const long long t = detail::parse_int(fields[1], line_no);
    if (ids.empty() || ids.back() != id) {
      if (std::find(ids.begin(), ids.end(), id) != ids.end()) {
        throw ParseError("utterance '" + id + "' is not contiguous", line_no);
      }
      ids.push_back(id);
      xs.emplace_back();
      ys.emplace_back();
    }
    if (t != static_cast<long long>(xs.back().size())) throw ParseError("frame index out of order", line_no);
    std::vector<double> x(static_cast<std::size_t>(data.input_dim));
    std::vector<double> y(static_cast<std::size_t>(data.output_dim));
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = detail::parse_double(fields[2 + j], line_no);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] = detail::parse_double(fields[2 + x.size() + j], line_no);
    xs.back().push_back(std::move(x));
    ys.back().push_back(std::move(y));
    ++read;
  }
  if (read != frames || static_cast<long long>(ids.size()) != utterances) {
    throw ParseError("file ends after " + std::to_string(read) + " of " + std::to_string(frames) + " frames",
                     line_no + 1);
  }
  for (std::size_t u = 0; u < ids.size(); ++u) {
    SequenceBatch b;
    b.id = ids[u];
    const auto steps = static_cast<Eigen::Index>(xs[u].size());
    b.inputs.resize(steps, data.input_dim);
    b.targets.resize(steps, data.output_dim);
    for (Eigen::Index t = 0; t < steps; ++t) {
      for (Eigen::Index j = 0; j < data.input_dim; ++j) b.inputs(t, j) = xs[u][t][j];
      for (Eigen::Index j = 0; j < data.output_dim; ++j) b.targets(t, j) = ys[u][t][j];
    }
    data.utterances.push_back(std::move(b));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  Vector per_dim_rmse;
  double rmse = 0.0;
  std::vector<std::pair<std::string, double>> per_utterance_rmse;
  long long frames = 0;
  double seconds_per_frame = 0.0;  // generation only
};

/// Metrics of given predictions against the dataset targets.
inline MetricsReport evaluate_predictions(const Dataset& data, const std::vector<Matrix>& predictions) {
  if (predictions.size() != data.utterances.size()) throw InputError("one prediction per utterance is required");
  MetricsReport r;
  Vector sq = Vector::Zero(data.output_dim);
  for (std::size_t u = 0; u < predictions.size(); ++u) {
    const Matrix& target = data.utterances[u].targets;
    if (predictions[u].rows() != target.rows() || predictions[u].cols() != target.cols()) {
      throw InputError("prediction shape does not match utterance '" + data.utterances[u].id + "'");
    }
    const Matrix err = (predictions[u] - target).cwiseAbs2();
    sq += err.colwise().sum().transpose();
    r.frames += target.rows();
    r.per_utterance_rmse.emplace_back(data.utterances[u].id, std::sqrt(err.mean()));
  }
  const double n = static_cast<double>(r.frames);
  r.per_dim_rmse = (sq / n).cwiseSqrt();
  r.rmse = std::sqrt(sq.sum() / (n * static_cast<double>(data.output_dim)));
  return r;
}

/// Runs generation per utterance and reports RMSE. Only the generate calls
/// are timed.
inline MetricsReport evaluate(const Model& model, const Dataset& data) {
  if (data.input_dim != model.input_dim() || data.output_dim != model.output_dim()) {
    throw ConfigError("dataset widths (" + std::to_string(data.input_dim) + ", " + std::to_string(data.output_dim) +
                      ") do not match the model (" + std::to_string(model.input_dim()) + ", " +
                      std::to_string(model.output_dim()) + ")");
  }
  std::vector<Matrix> predictions;
  predictions.reserve(data.utterances.size());
  double seconds = 0.0;
  for (const SequenceBatch& u : data.utterances) {
    const auto start = std::chrono::steady_clock::now();
    predictions.push_back(generate(model, u.inputs));
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  MetricsReport r = evaluate_predictions(data, predictions);
  r.seconds_per_frame = r.frames > 0 ? seconds / static_cast<double>(r.frames) : 0.0;
  return r;
}

}  // namespace srudgp
