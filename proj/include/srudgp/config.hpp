#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srudgp/harness.hpp"
#include "srudgp/model.hpp"

namespace srudgp {

using Json = nlohmann::ordered_json;

inline Json to_json(const AdamConfig& a) {
  return Json{{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

inline Json to_json(const ModelConfig& c) {
  return Json{{"arch", to_string(c.arch)},
              {"layers", c.layers},
              {"topology", c.topology},
              {"hidden_width", c.hidden_width},
              {"inducing", c.inducing},
              {"features", c.features},
              {"kernel", to_string(c.kernel)},
              {"noise_var", c.noise_var},
              {"noise_per_dim", c.noise_per_dim},
              {"samples", c.samples},
              {"objective", to_string(c.objective)},
              {"freeze_v", c.freeze_v},
              {"adam", to_json(c.adam)},
              {"iterations", c.iterations},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every}};
}

inline Json to_json(const TaskSpec& s) {
  return Json{{"kind", to_string(s.kind)},   {"seed", s.seed},         {"utterances", s.utterances},
              {"frames", s.frames},          {"input_dim", s.input_dim}, {"output_dim", s.output_dim},
              {"noise_sd", s.noise_sd},      {"lag", s.lag},           {"smoothing", s.smoothing},
              {"input_correlation", s.input_correlation}};
}

namespace detail {

/// Reads `key` from `j` into `out` when present; type errors name the field.
template <typename T>
void read_field(const Json& j, const std::string& prefix, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + prefix + key + "' has the wrong type");
  }
}

inline void reject_unknown(const Json& j, const std::string& prefix, const std::vector<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config field '" + prefix + key + "'");
    }
  }
}

}  // namespace detail

/// Fields absent from `j` keep the values of `base`. When `objective` is
/// absent it follows the arch: frame-level for ff-dgp, utterance-level else.
inline ModelConfig model_config_from_json(const Json& j, ModelConfig base = {}) {
  detail::reject_unknown(j, "model.",
                         {"arch", "layers", "topology", "hidden_width", "inducing", "features", "kernel", "noise_var",
                          "noise_per_dim", "samples", "objective", "freeze_v", "adam", "iterations", "seed",
                          "checkpoint_every"});
  ModelConfig c = base;
  std::string text;
  if (j.contains("arch")) {
    detail::read_field(j, "model.", "arch", text);
    c.arch = arch_from_string(text);
    c.objective = ModelConfig::default_objective(c.arch);
  }
  detail::read_field(j, "model.", "layers", c.layers);
  detail::read_field(j, "model.", "topology", c.topology);
  detail::read_field(j, "model.", "hidden_width", c.hidden_width);
  detail::read_field(j, "model.", "inducing", c.inducing);
  detail::read_field(j, "model.", "features", c.features);
  if (j.contains("kernel")) {
    detail::read_field(j, "model.", "kernel", text);
    c.kernel = kernel_kind_from_string(text);
  }
  detail::read_field(j, "model.", "noise_var", c.noise_var);
  detail::read_field(j, "model.", "noise_per_dim", c.noise_per_dim);
  detail::read_field(j, "model.", "samples", c.samples);
  if (j.contains("objective")) {
    detail::read_field(j, "model.", "objective", text);
    c.objective = objective_from_string(text);
  }
  detail::read_field(j, "model.", "freeze_v", c.freeze_v);
  if (j.contains("adam")) {
    const Json& a = j.at("adam");
    detail::reject_unknown(a, "model.adam.", {"lr", "beta1", "beta2", "eps"});
    detail::read_field(a, "model.adam.", "lr", c.adam.lr);
    detail::read_field(a, "model.adam.", "beta1", c.adam.beta1);
    detail::read_field(a, "model.adam.", "beta2", c.adam.beta2);
    detail::read_field(a, "model.adam.", "eps", c.adam.eps);
  }
  detail::read_field(j, "model.", "iterations", c.iterations);
  detail::read_field(j, "model.", "seed", c.seed);
  detail::read_field(j, "model.", "checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

/// `kind` is required.
inline TaskSpec task_spec_from_json(const Json& j) {
  detail::reject_unknown(j, "data.",
                         {"kind", "seed", "utterances", "frames", "input_dim", "output_dim", "noise_sd", "lag",
                          "smoothing", "input_correlation", "train_utterances", "dev_utterances", "test_utterances"});
  if (!j.contains("kind")) throw ConfigError("missing config field 'data.kind'");
  TaskSpec s;
  std::string kind;
  detail::read_field(j, "data.", "kind", kind);
  s.kind = task_kind_from_string(kind);
  detail::read_field(j, "data.", "seed", s.seed);
  detail::read_field(j, "data.", "utterances", s.utterances);
  detail::read_field(j, "data.", "frames", s.frames);
  detail::read_field(j, "data.", "input_dim", s.input_dim);
  detail::read_field(j, "data.", "output_dim", s.output_dim);
  detail::read_field(j, "data.", "noise_sd", s.noise_sd);
  detail::read_field(j, "data.", "lag", s.lag);
  detail::read_field(j, "data.", "smoothing", s.smoothing);
  detail::read_field(j, "data.", "input_correlation", s.input_correlation);
  s.validate();
  return s;
}

/// Sets the value at a dotted path ("model.adam.lr"). The text is parsed as
/// JSON when possible (numbers, booleans, arrays) and kept as a string
/// otherwise.
inline void apply_override(Json& root, const std::string& path, const std::string& text) {
  if (path.empty()) throw ConfigError("empty override path");
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  Json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed override path '" + path + "'");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override path '" + path + "' crosses a non-object value");
      *node = Json::object();
    }
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid JSON in '") + path + "': " + e.what(), 0);
  }
}

inline void write_json_file(const Json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  out.flush();
  if (!out) throw IoError("failed while writing '" + path + "'");
}

}  // namespace srudgp
