// Experiment runner: SC-VAMP recoveries, state-evolution traces, EXIT scans,
// decoupling diagnostics, the Langevin hybrid demo, and score training.

#include "scvamp/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<int> threads;
};

void attach_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Path to the JSON experiment config")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", args.seed, "Override the config seed");
  cmd->add_option("--out", args.out_dir, "Output directory (default: config 'output')");
  cmd->add_option("--threads", args.threads,
                  "Worker threads (default: config value or SCVAMP_THREADS)");
}

scvamp::ExperimentConfig resolve(const CommonArgs& args, const char* forced_experiment) {
  scvamp::ExperimentConfig config = scvamp::load_experiment_config(args.config_path);
  if (forced_experiment != nullptr) config.experiment = forced_experiment;
  if (args.seed.has_value()) config.seed = *args.seed;
  if (args.threads.has_value()) {
    config.threads = *args.threads;
  } else if (const char* env = std::getenv("SCVAMP_THREADS"); env != nullptr) {
    config.threads = std::max(1, std::atoi(env));
  }
  return config;
}

std::string out_dir_for(const CommonArgs& args, const scvamp::ExperimentConfig& config) {
  return args.out_dir.empty() ? config.output : args.out_dir;
}

int execute(const CommonArgs& args, const char* forced_experiment, bool train) {
  try {
    const scvamp::ExperimentConfig config = resolve(args, forced_experiment);
    const scvamp::RunArtifacts artifacts =
        train ? scvamp::train_score_command(config, out_dir_for(args, config))
              : scvamp::run_experiment(config, out_dir_for(args, config));
    std::cout << artifacts.summary_text;
    return 0;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"score-based VAMP experiment runner"};
  app.require_subcommand(1);

  CommonArgs run_args, train_args, se_args, exit_args, diag_args, demo_args;
  CLI::App* run = app.add_subcommand("run", "Run the experiment named in the config");
  attach_common(run, run_args);
  CLI::App* train = app.add_subcommand("train-score", "Train the pairwise score network");
  attach_common(train, train_args);
  CLI::App* se = app.add_subcommand("se", "State-evolution trace only");
  attach_common(se, se_args);
  CLI::App* exit_cmd = app.add_subcommand("exit", "EXIT-style transfer curves and staircase");
  attach_common(exit_cmd, exit_args);
  CLI::App* diagnose = app.add_subcommand("diagnose", "Decoupling diagnostics on captured errors");
  attach_common(diagnose, diag_args);
  CLI::App* demo = app.add_subcommand("langevin-demo", "Sampled observation-module demo");
  attach_common(demo, demo_args);

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) return execute(run_args, nullptr, false);
  if (train->parsed()) return execute(train_args, nullptr, true);
  if (se->parsed()) return execute(se_args, "se-only", false);
  if (exit_cmd->parsed()) return execute(exit_args, "exit", false);
  if (diagnose->parsed()) return execute(diag_args, "diagnostics", false);
  if (demo->parsed()) return execute(demo_args, "langevin-demo", false);
  return 1;
}
