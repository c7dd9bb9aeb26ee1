#include <cstdint>
#include <exception>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "srudgp/cli.hpp"

namespace {

struct CommandArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string out;
  long long iters = 0;
  int layers = 0;
  int inducing = 0;
  std::string arch;
  std::string checkpoint;
  std::string resume;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, CommandArgs& args) {
  CLI::App* cmd = app.add_subcommand(name, help);
  cmd->add_option("--config", args.config_path, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", args.seed, "master seed (model and data)");
  cmd->add_option("--out", args.out, "output directory");
  cmd->add_option("--iters", args.iters, "training iterations");
  cmd->add_option("--layers", args.layers, "number of layers");
  cmd->add_option("--inducing", args.inducing, "inducing points per GP");
  cmd->add_option("--arch", args.arch, "ff-dgp, sru-dgp or sru-nn")
      ->check(CLI::IsMember({"ff-dgp", "sru-dgp", "sru-nn"}));
  cmd->add_option("overrides", args.overrides, "dotted overrides, e.g. model.adam.lr=0.005");
  return cmd;
}

srudgp::FlagOverrides flags_of(CLI::App* cmd, const CommandArgs& args) {
  srudgp::FlagOverrides f;
  if (cmd->count("--seed")) f.seed = args.seed;
  if (cmd->count("--out")) f.out = args.out;
  if (cmd->count("--iters")) f.iters = args.iters;
  if (cmd->count("--layers")) f.layers = args.layers;
  if (cmd->count("--inducing")) f.inducing = args.inducing;
  if (cmd->count("--arch")) f.arch = args.arch;
  if (cmd->get_option_no_throw("--checkpoint") && cmd->count("--checkpoint")) f.checkpoint = args.checkpoint;
  if (cmd->get_option_no_throw("--resume") && cmd->count("--resume")) f.resume = args.resume;
  return f;
}

int exit_code(const std::string& kind) {
  static const std::map<std::string, int> codes = {{"config", 2}, {"io", 3}, {"parse", 4}, {"input", 5},
                                                   {"domain", 6}, {"singularity", 7}, {"numerical", 8},
                                                   {"contract", 9}};
  const auto it = codes.find(kind);
  return it == codes.end() ? 1 : it->second;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep Gaussian process sequence models with SRU layers"};
  app.set_version_flag("--version", SRUDGP_VERSION);
  app.require_subcommand(1);

  CommandArgs args;
  CLI::App* gen = add_command(app, "gen-data", "generate train/dev/test datasets", args);
  CLI::App* train = add_command(app, "train", "train a model and write its ELBO trace", args);
  train->add_option("--resume", args.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  CLI::App* eval = add_command(app, "eval", "evaluate a checkpoint", args);
  eval->add_option("--checkpoint", args.checkpoint, "checkpoint to evaluate");
  CLI::App* bench = add_command(app, "bench", "time generation per architecture and depth", args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << srudgp::diagnostic_line("parse-args", "usage", e.what()) << '\n';
    return 64;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    const srudgp::Json file = args.config_path.empty() ? srudgp::Json() : srudgp::load_json_file(args.config_path);
    const srudgp::RunConfig config = srudgp::resolve_run_config(name, file, args.overrides, flags_of(cmd, args));
    if (cmd == gen) {
      srudgp::cmd_gen_data(config);
    } else if (cmd == train) {
      const srudgp::TrainState state = srudgp::cmd_train(config);
      std::cout << "trained " << state.iteration << " iterations; output in " << config.out << '\n';
    } else if (cmd == eval) {
      const srudgp::MetricsReport report = srudgp::cmd_eval(config);
      std::cout << "rmse " << report.rmse << " over " << report.frames << " frames\n";
    } else if (cmd == bench) {
      for (const srudgp::BenchRow& r : srudgp::cmd_bench(config)) {
        std::cout << r.arch << " L=" << r.layers << " sec/frame " << r.mean_seconds_per_frame << " (sd "
                  << r.sd_seconds_per_frame << ") gp_calls " << r.gp_call_count << '\n';
      }
    }
  } catch (const srudgp::Error& e) {
    std::cerr << srudgp::diagnostic_line(name, e.kind(), e.what()) << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << srudgp::diagnostic_line(name, "internal", e.what()) << '\n';
    return 1;
  }
  return 0;
}
