#include <cstdio>
#include <exception>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "sparseloc/commands.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::int64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  bool seed_given() const { return seed_opt != nullptr && seed_opt->count() > 0; }
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "run-config file")->required();
  cmd->add_option("--set", args.sets,
                  "override a config key, e.g. --set quantizer.mode=cartesian");
  cmd->add_option("--out", args.out, "output directory (overrides run.out_dir)");
  args.seed_opt =
      cmd->add_option("--seed", args.seed, "master seed (overrides run.seed)");
}

sparseloc::cli::RunConfig make_config(const CommonArgs& args) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const std::string& s : args.sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw sparseloc::config_error("--set expects key=value, got '" + s + "'");
    overrides.push_back({s.substr(0, eq), s.substr(eq + 1)});
  }
  if (!args.out.empty()) overrides.push_back({"run.out_dir", args.out});
  if (args.seed_given())
    overrides.push_back({"run.seed", std::to_string(args.seed)});
  sparseloc::cli::RunConfig cfg =
      sparseloc::cli::load_run_config(args.config, overrides);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse-convolution LiDAR place recognition toolkit"};
  app.require_subcommand(1);

  CommonArgs pre_args, train_args, eval_args, ablate_args, bench_args;
  CLI::App* pre = app.add_subcommand("preprocess", "build a canonical dataset");
  add_common(pre, pre_args);
  CLI::App* train = app.add_subcommand("train", "train a descriptor network");
  add_common(train, train_args);
  CLI::App* evalc = app.add_subcommand("eval", "recall evaluation of a checkpoint");
  add_common(evalc, eval_args);
  CLI::App* ablate = app.add_subcommand("ablate", "single-axis parameter sweep");
  add_common(ablate, ablate_args);
  CLI::App* bench = app.add_subcommand("bench", "inference timing report");
  add_common(bench, bench_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (pre->parsed()) sparseloc::cli::cmd_preprocess(make_config(pre_args));
    if (train->parsed()) sparseloc::cli::cmd_train(make_config(train_args));
    if (evalc->parsed()) sparseloc::cli::cmd_eval(make_config(eval_args));
    if (ablate->parsed()) sparseloc::cli::cmd_ablate(make_config(ablate_args));
    if (bench->parsed()) sparseloc::cli::cmd_bench(make_config(bench_args));
  } catch (const sparseloc::config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const sparseloc::data_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime error: %s\n", e.what());
    return 1;
  }
  return 0;
}
