#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "srudgp/trainer.hpp"

namespace srudgp {

/// Settings for `bench`: architectures and layer counts to time on fresh
/// models with randomized variational means.
struct BenchConfig {
  std::vector<std::string> archs = {"ff-dgp", "sru-dgp", "sru-nn"};
  std::vector<int> layers = {3, 4, 5, 6, 7, 8};
  int trials = 10;
  int frames = 200;
  int input_dim = 3;
  int output_dim = 2;
};

/// A command's fully resolved configuration.
struct RunConfig {
  std::string command;
  std::string out = "run";
  ModelConfig model = ModelConfig::desk();
  std::optional<TaskSpec> data;
  int train_utterances = 64;
  int dev_utterances = 16;
  int test_utterances = 16;
  std::string train_path, dev_path, test_path, checkpoint_path, resume_path;
  std::string eval_split = "test";
  BenchConfig bench;
  Json resolved;
};

/// Named flags; each one is applied after the file and dotted overrides.
struct FlagOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<long long> iters;
  std::optional<int> layers;
  std::optional<int> inducing;
  std::optional<std::string> arch;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
};

namespace detail {

inline Json run_config_to_json(const RunConfig& c) {
  Json j;
  j["command"] = c.command;
  j["library_version"] = SRUDGP_VERSION;
  j["out"] = c.out;
  j["model"] = to_json(c.model);
  if (c.data) {
    Json d = to_json(*c.data);
    d.erase("utterances");
    d["train_utterances"] = c.train_utterances;
    d["dev_utterances"] = c.dev_utterances;
    d["test_utterances"] = c.test_utterances;
    j["data"] = d;
  }
  j["paths"] = Json{{"train", c.train_path},
                    {"dev", c.dev_path},
                    {"test", c.test_path},
                    {"checkpoint", c.checkpoint_path},
                    {"resume", c.resume_path}};
  j["eval"] = Json{{"split", c.eval_split}};
  j["bench"] = Json{{"archs", c.bench.archs},         {"layers", c.bench.layers},
                    {"trials", c.bench.trials},       {"frames", c.bench.frames},
                    {"input_dim", c.bench.input_dim}, {"output_dim", c.bench.output_dim}};
  return j;
}

inline std::string csv_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

inline void finish_output(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("failed while writing '" + path + "'");
}

inline void make_output_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

}  // namespace detail

/// Resolves a run configuration. Precedence, lowest first: built-in
/// defaults, the config file, dotted `key=value` overrides, named flags. A
/// top-level `seed` replaces both model.seed and data.seed.
inline RunConfig resolve_run_config(const std::string& command, const Json& file,
                                    const std::vector<std::string>& dotted, const FlagOverrides& flags) {
  Json root = file.is_null() ? Json::object() : file;
  if (!root.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const std::string& item : dotted) {
    const std::size_t eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + item + "' is not of the form key=value");
    apply_override(root, item.substr(0, eq), item.substr(eq + 1));
  }
  if (flags.seed) root["seed"] = *flags.seed;
  if (flags.out) root["out"] = *flags.out;
  if (flags.iters) root["model"]["iterations"] = *flags.iters;
  if (flags.layers) {
    root["model"]["layers"] = *flags.layers;
    if (root["model"].contains("topology")) root["model"].erase("topology");
  }
  if (flags.inducing) root["model"]["inducing"] = *flags.inducing;
  if (flags.arch) root["model"]["arch"] = *flags.arch;
  if (flags.checkpoint) root["paths"]["checkpoint"] = *flags.checkpoint;
  if (flags.resume) root["paths"]["resume"] = *flags.resume;

  detail::reject_unknown(root, "", {"seed", "out", "model", "data", "paths", "eval", "bench", "command",
                                    "library_version"});
  RunConfig c;
  c.command = command;
  std::optional<std::uint64_t> seed;
  if (root.contains("seed")) {
    std::uint64_t s = 0;
    detail::read_field(root, "", "seed", s);
    seed = s;
  }
  detail::read_field(root, "", "out", c.out);
  if (c.out.empty()) throw ConfigError("config field 'out' must not be empty");
  if (root.contains("model")) c.model = model_config_from_json(root["model"], ModelConfig::desk());
  if (seed) c.model.seed = *seed;
  if (root.contains("data")) {
    const Json& d = root["data"];
    Json task = d;
    for (const char* key : {"train_utterances", "dev_utterances", "test_utterances"}) task.erase(key);
    c.data = task_spec_from_json(task);
    detail::read_field(d, "data.", "train_utterances", c.train_utterances);
    detail::read_field(d, "data.", "dev_utterances", c.dev_utterances);
    detail::read_field(d, "data.", "test_utterances", c.test_utterances);
    if (d.contains("utterances") && !d.contains("train_utterances")) c.train_utterances = c.data->utterances;
    if (seed) c.data->seed = *seed;
    for (int n : {c.train_utterances, c.dev_utterances, c.test_utterances}) {
      if (n < 1) throw ConfigError("data.*_utterances must be at least 1");
    }
  }
  if (root.contains("paths")) {
    const Json& p = root["paths"];
    detail::reject_unknown(p, "paths.", {"train", "dev", "test", "checkpoint", "resume"});
    detail::read_field(p, "paths.", "train", c.train_path);
    detail::read_field(p, "paths.", "dev", c.dev_path);
    detail::read_field(p, "paths.", "test", c.test_path);
    detail::read_field(p, "paths.", "checkpoint", c.checkpoint_path);
    detail::read_field(p, "paths.", "resume", c.resume_path);
  }
  if (root.contains("eval")) {
    detail::reject_unknown(root["eval"], "eval.", {"split"});
    detail::read_field(root["eval"], "eval.", "split", c.eval_split);
    split_index(c.eval_split);
  }
  if (root.contains("bench")) {
    const Json& b = root["bench"];
    detail::reject_unknown(b, "bench.", {"archs", "layers", "trials", "frames", "input_dim", "output_dim"});
    detail::read_field(b, "bench.", "archs", c.bench.archs);
    detail::read_field(b, "bench.", "layers", c.bench.layers);
    detail::read_field(b, "bench.", "trials", c.bench.trials);
    detail::read_field(b, "bench.", "frames", c.bench.frames);
    detail::read_field(b, "bench.", "input_dim", c.bench.input_dim);
    detail::read_field(b, "bench.", "output_dim", c.bench.output_dim);
    for (const std::string& a : c.bench.archs) arch_from_string(a);
    for (int l : c.bench.layers) {
      if (l < 2) throw ConfigError("bench.layers entries must be at least 2");
    }
    if (c.bench.trials < 1 || c.bench.frames < 1 || c.bench.input_dim < 1 || c.bench.output_dim < 1) {
      throw ConfigError("bench sizes must be positive");
    }
  }
  c.resolved = detail::run_config_to_json(c);
  return c;
}

/// Creates the output directory and writes config.json (resolved config plus
/// library version). Every command calls this before computing.
inline void write_resolved_config(const RunConfig& c) {
  detail::make_output_dir(c.out);
  write_json_file(c.resolved, detail::join(c.out, "config.json"));
}

inline TaskSpec split_spec(const RunConfig& c, const std::string& split) {
  if (!c.data) throw ConfigError("missing config field 'data.kind'");
  TaskSpec s = *c.data;
  s.utterances = split == "train" ? c.train_utterances : split == "dev" ? c.dev_utterances : c.test_utterances;
  return s;
}

/// Loads the split from its path when one is configured, otherwise generates
/// it from the data section.
inline Dataset load_split(const RunConfig& c, const std::string& split) {
  const std::string& path = split == "train" ? c.train_path : split == "dev" ? c.dev_path : c.test_path;
  if (!path.empty()) return load_dataset(path);
  return gen_task(split_spec(c, split), split);
}

// ---------------------------------------------------------------------------
// Commands

/// Writes train.txt, dev.txt, test.txt and provenance.json.
inline void cmd_gen_data(const RunConfig& c) {
  if (!c.data) throw ConfigError("missing config field 'data.kind'");
  for (const std::string split : {"train", "dev", "test"}) split_spec(c, split).validate();
  write_resolved_config(c);
  Json files = Json::object();
  for (const std::string split : {"train", "dev", "test"}) {
    const Dataset data = gen_task(split_spec(c, split), split);
    const std::string name = split + ".txt";
    save_dataset(data, detail::join(c.out, name));
    files[split] = Json{{"file", name}, {"utterances", data.utterances.size()}, {"frames", data.total_frames()}};
  }
  write_json_file(Json{{"generator", to_json(*c.data)}, {"library_version", SRUDGP_VERSION}, {"files", files}},
                  detail::join(c.out, "provenance.json"));
}

/// Trains (or resumes) a model. Writes trace.csv with one row per iteration,
/// checkpoint-<iteration>.json every model.checkpoint_every iterations and
/// checkpoint.json at the end. A resumed run keeps the checkpoint's model
/// settings and takes `iterations` and `checkpoint_every` from `c`.
inline TrainState cmd_train(const RunConfig& c) {
  write_resolved_config(c);
  const Dataset train = load_split(c, "train");
  TrainState state;
  if (c.resume_path.empty()) {
    state = start_training(c.model, train);
  } else {
    state = load_checkpoint(c.resume_path);
    state.model.config.iterations = c.model.iterations;
    state.model.config.checkpoint_every = c.model.checkpoint_every;
    if (state.iteration > state.model.config.iterations) {
      throw ConfigError("checkpoint is already past model.iterations");
    }
  }
  const std::string trace_path = detail::join(c.out, "trace.csv");
  std::ofstream trace = detail::open_output(trace_path);
  trace << "iteration,loglik,kl,kl_scale,total\n";
  FitCallbacks callbacks;
  callbacks.on_iteration = [&](long long it, const ElboBreakdown& e) {
    trace << it << ',' << detail::csv_double(e.loglik) << ',' << detail::csv_double(e.kl_sum()) << ','
          << detail::csv_double(e.kl_scale) << ',' << detail::csv_double(e.total) << '\n';
  };
  callbacks.on_checkpoint = [&](const TrainState& s) {
    char name[48];
    std::snprintf(name, sizeof name, "checkpoint-%06lld.json", s.iteration);
    save_checkpoint(s, detail::join(c.out, name));
  };
  fit(state, train, callbacks);
  detail::finish_output(trace, trace_path);
  save_checkpoint(state, detail::join(c.out, "checkpoint.json"));
  return state;
}

/// Evaluates a checkpoint on the configured split. metrics.csv and
/// utterances.csv depend only on the model and data; wall-clock generation
/// time goes to timing.csv.
inline MetricsReport cmd_eval(const RunConfig& c) {
  write_resolved_config(c);
  if (c.checkpoint_path.empty()) throw ConfigError("missing config field 'paths.checkpoint'");
  if (!std::filesystem::exists(c.checkpoint_path)) {
    throw IoError("checkpoint '" + c.checkpoint_path + "' does not exist");
  }
  const TrainState state = load_checkpoint(c.checkpoint_path);
  const Dataset data = load_split(c, c.eval_split);
  if (data.input_dim != state.model.input_dim() || data.output_dim != state.model.output_dim()) {
    throw ConfigError("checkpoint widths do not match the dataset");
  }
  const MetricsReport report = evaluate(state.model, data);

  const std::string metrics_path = detail::join(c.out, "metrics.csv");
  std::ofstream metrics = detail::open_output(metrics_path);
  metrics << "metric,value\n";
  metrics << "rmse," << detail::csv_double(report.rmse) << '\n';
  for (Eigen::Index d = 0; d < report.per_dim_rmse.size(); ++d) {
    metrics << "rmse_dim" << d << ',' << detail::csv_double(report.per_dim_rmse(d)) << '\n';
  }
  metrics << "utterances," << data.utterances.size() << '\n';
  metrics << "frames," << report.frames << '\n';
  detail::finish_output(metrics, metrics_path);

  const std::string utt_path = detail::join(c.out, "utterances.csv");
  std::ofstream utt = detail::open_output(utt_path);
  utt << "utterance,frames,rmse\n";
  for (std::size_t u = 0; u < data.utterances.size(); ++u) {
    utt << report.per_utterance_rmse[u].first << ',' << data.utterances[u].frames() << ','
        << detail::csv_double(report.per_utterance_rmse[u].second) << '\n';
  }
  detail::finish_output(utt, utt_path);

  const std::string timing_path = detail::join(c.out, "timing.csv");
  std::ofstream timing = detail::open_output(timing_path);
  timing << "frames,seconds_per_frame\n" << report.frames << ',' << detail::csv_double(report.seconds_per_frame) << '\n';
  detail::finish_output(timing, timing_path);
  return report;
}

struct BenchRow {
  std::string arch;
  int layers = 0;
  int trials = 0;
  int frames = 0;
  double mean_seconds_per_frame = 0.0;
  double sd_seconds_per_frame = 0.0;
  int gp_call_count = 0;
};

/// Times mean-mode generation on fresh models for every (arch, layers)
/// pair. gp_call_count is the instrumented number of GP evaluations for one
/// utterance. Writes bench.csv.
inline std::vector<BenchRow> cmd_bench(const RunConfig& c) {
  write_resolved_config(c);
  const BenchConfig& b = c.bench;
  std::mt19937_64 rng(derive_seed(c.model.seed, kDataStream, 100));
  std::normal_distribution<double> normal;
  Matrix x(b.frames, b.input_dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);

  std::vector<BenchRow> rows;
  for (const std::string& arch_name : b.archs) {
    for (int layers : b.layers) {
      ModelConfig config = c.model;
      config.arch = arch_from_string(arch_name);
      config.objective = ModelConfig::default_objective(config.arch);
      config.layers = layers;
      config.topology.clear();
      Model model = build_model(config, b.input_dim, b.output_dim);
      randomize_means(model, derive_seed(config.seed, kInitStream, 1000 + static_cast<std::uint64_t>(layers)));
      NoiseSource none = NoiseSource::zeros();
      BenchRow row{arch_name, layers, b.trials, b.frames, 0.0, 0.0,
                   stack_forward(model.layers, x, StackMode::Mean, none, model.options).gp_call_count};
      std::vector<double> per_frame;
      for (int trial = 0; trial < b.trials; ++trial) {
        const auto start = std::chrono::steady_clock::now();
        const Matrix y = generate(model, x);
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!y.allFinite()) throw NumericalError("bench: generation produced non-finite values");
        per_frame.push_back(seconds / b.frames);
      }
      double mean = 0.0;
      for (double v : per_frame) mean += v;
      mean /= static_cast<double>(per_frame.size());
      double var = 0.0;
      for (double v : per_frame) var += (v - mean) * (v - mean);
      row.mean_seconds_per_frame = mean;
      row.sd_seconds_per_frame = per_frame.size() > 1 ? std::sqrt(var / static_cast<double>(per_frame.size() - 1)) : 0.0;
      rows.push_back(row);
    }
  }
  const std::string path = detail::join(c.out, "bench.csv");
  std::ofstream out = detail::open_output(path);
  out << "arch,layers,trials,frames,mean_seconds_per_frame,sd_seconds_per_frame,gp_call_count\n";
  for (const BenchRow& r : rows) {
    out << r.arch << ',' << r.layers << ',' << r.trials << ',' << r.frames << ','
        << detail::csv_double(r.mean_seconds_per_frame) << ',' << detail::csv_double(r.sd_seconds_per_frame) << ','
        << r.gp_call_count << '\n';
  }
  detail::finish_output(out, path);
  return rows;
}

/// One-line diagnostic for the error stream.
inline std::string diagnostic_line(const std::string& command, const std::string& kind, const std::string& message) {
  std::string flat = message;
  for (char& ch : flat) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return "srudgp: error command=" + command + " kind=" + kind + " message=" + flat;
}

}  // namespace srudgp
