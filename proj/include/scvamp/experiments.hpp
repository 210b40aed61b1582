#pragma once

#include "scvamp/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace scvamp {

struct PriorConfig {
  std::string kind = "bernoulli-gaussian";  // gaussian | bernoulli-gaussian | pairwise-gaussian
  double power = 1.0;                       // gaussian
  double sparsity = 0.1;                    // bernoulli-gaussian
  double active_variance = 1.0;
  double variance = 1.0;  // pairwise-gaussian
  double correlation = 0.9;
};

struct DsmSection {
  double sigma_min = 0.01;
  double sigma_max = 3.0;
  long iterations = 20000;
  int batch = 256;
  double lr0 = 1e-3;
  bool antithetic = true;
  std::string weights;  // weight file consumed by correlated-learned runs
};

struct LangevinSection {
  std::string forward = "tanh";  // linear | tanh | clip
  double clip_limit = 2.0;
  double step_size = -1.0;  // < 0: auto
  int steps = 500;
  int burn_in = 200;
  int particles = 32;
  bool warm_start = true;
  std::string step_decay = "constant";
};

/// Fully defaulted experiment description. Parsing fills every field, so the
/// serialized form echoes the defaults a run actually used.
struct ExperimentConfig {
  std::string experiment = "linear-bg";
  long n = 2000;
  long m = 1000;
  int batch = 200;
  int iterations = 20;
  std::uint64_t seed = 1;
  double snr_db = 20.0;
  std::string snr_convention = "received-power";  // or "per-component"
  double noise_variance = -1.0;                   // > 0 overrides the SNR-derived value
  PriorConfig prior;
  std::string score_b = "analytic";  // or "learned-mlp"
  bool calibration_a = false;
  bool calibration_b = false;
  std::string fisher_mode_a = "auto";  // auto | minibatch | exact
  std::string fisher_mode_b = "auto";
  double v_init = -1.0;  // < 0: prior marginal variance
  double damping = 1.0;
  double stop_tolerance = 1e-8;
  int capture_errors_iteration = -1;
  int se_nodes = 129;
  int se_mc_batch = 50;
  std::string spectrum = "unit";
  std::vector<double> singular_values;  // explicit spectrum (overrides "unit")
  double exit_grid_min = -1.0;
  double exit_grid_max = -1.0;
  int exit_grid_points = 40;
  int diagnostics_lags = 8;
  DsmSection dsm;
  LangevinSection langevin;
  int threads = 1;
  std::string output = ".";
};

/// Parse a JSON config. Unknown keys and ill-typed values raise
/// std::invalid_argument naming the offending field.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Canonical serialized form (sorted keys, all defaults filled in).
std::string serialize_experiment_config(const ExperimentConfig& config);

/// FNV-1a hash of the canonical serialization, as embedded in summary.json.
std::string experiment_config_hash(const ExperimentConfig& config);

struct RunArtifacts {
  std::filesystem::path trace_csv;
  std::filesystem::path summary_json;
  std::filesystem::path exit_csv;
  std::filesystem::path diagnostics_json;
  std::filesystem::path weights_file;
  std::filesystem::path plot_script;
  std::string summary_text;  // contents of summary_json
};

/// Run the configured experiment, writing trace.csv / summary.json (and
/// exit_curves.csv, diagnostics.json where the pipeline produces them) into
/// out_dir. All writes are atomic (temp file + rename).
RunArtifacts run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

/// Train the pairwise score network per the dsm section and write the weight
/// file plus a training report.
RunArtifacts train_score_command(const ExperimentConfig& config,
                                 const std::filesystem::path& out_dir);

/// Fixed trace.csv column set; the schema line written above the header.
std::string trace_schema_line();

}  // namespace scvamp
