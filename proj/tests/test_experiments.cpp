#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "scvamp/dsm.hpp"
#include "scvamp/experiments.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace scvamp;
using nlohmann::json;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("scvamp_exp_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("config parsing fills kind defaults and round-trips") {
  const ExperimentConfig c = parse_experiment_config(R"({"experiment": "scalar-gaussian"})");
  CHECK(c.n == 1);
  CHECK(c.prior.kind == "gaussian");
  CHECK(c.noise_variance == 0.25);
  CHECK(c.batch == 10000);

  const std::string once = serialize_experiment_config(c);
  const std::string twice = serialize_experiment_config(parse_experiment_config(once));
  CHECK(once == twice);

  const ExperimentConfig learned =
      parse_experiment_config(R"({"experiment": "correlated-learned"})");
  CHECK(learned.prior.kind == "pairwise-gaussian");
  CHECK(learned.score_b == "learned-mlp");
  CHECK_FALSE(learned.calibration_a);  // analytic observation module
  CHECK(learned.calibration_b);        // learned denoiser module
  const ExperimentConfig both = parse_experiment_config(
      R"({"experiment": "correlated-learned", "calibration": true})");
  CHECK(both.calibration_a);
  CHECK(both.calibration_b);
}

TEST_CASE("config errors name the offending field") {
  auto message_of = [](const std::string& text) {
    try {
      (void)parse_experiment_config(text);
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message_of(R"({"experiment": "linear-bg", "typo_key": 1})").find("typo_key") !=
        std::string::npos);
  CHECK(message_of(R"({"experiment": "nope"})").find("experiment") != std::string::npos);
  CHECK(message_of(R"({"experiment": "linear-bg", "n": "large"})").find("'n'") !=
        std::string::npos);
  CHECK(message_of(R"({"experiment": "linear-bg", "prior": {"kind": "weird"}})")
            .find("prior.kind") != std::string::npos);
  CHECK(message_of(R"({"experiment": "linear-bg", "dsm": {"nope": 1}})").find("dsm.nope") !=
        std::string::npos);
  CHECK(message_of("not json at all").find("JSON") != std::string::npos);
}

TEST_CASE("config hash tracks content") {
  const ExperimentConfig a = parse_experiment_config(R"({"experiment": "linear-bg", "seed": 1})");
  const ExperimentConfig b = parse_experiment_config(R"({"experiment": "linear-bg", "seed": 2})");
  CHECK(experiment_config_hash(a) == experiment_config_hash(a));
  CHECK(experiment_config_hash(a) != experiment_config_hash(b));
}

TEST_CASE("scalar-gaussian pipeline writes the full artifact set deterministically") {
  ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "scalar-gaussian", "batch": 500, "iterations": 4, "seed": 9})");
  const auto dir1 = fresh_dir("scalar1");
  const auto dir2 = fresh_dir("scalar2");
  const RunArtifacts a1 = run_experiment(c, dir1);
  const RunArtifacts a2 = run_experiment(c, dir2);

  CHECK(std::filesystem::exists(a1.trace_csv));
  CHECK(std::filesystem::exists(a1.summary_json));
  CHECK(std::filesystem::exists(a1.plot_script));
  CHECK(slurp(a1.trace_csv) == slurp(a2.trace_csv));  // bitwise rerun identity

  const json summary = json::parse(a1.summary_text);
  CHECK(summary["version"] == std::string(kVersion));
  CHECK(summary["seed"] == 9);
  CHECK(summary["config_hash"] == experiment_config_hash(c));
  CHECK(summary["results"]["v_star"].get<double>() == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(summary["results"]["mutual_information_nats"].get<double>() ==
        doctest::Approx(0.5 * std::log(5.0)).epsilon(1e-12));
  CHECK(summary["results"]["mad_vs_wiener"].get<double>() < 1e-12);

  // Fixed schema: comment line, then the pinned column set.
  std::istringstream trace(slurp(a1.trace_csv));
  std::string line;
  std::getline(trace, line);
  CHECK(line == trace_schema_line());
  std::getline(trace, line);
  CHECK(line ==
        "iter,v_in_A,v_out_A,v_in_B,v_out_B,alpha_A,alpha_B,fisher_A,fisher_B,calib_A,calib_B,"
        "mse_actual,mse_se,clip_events");
}

TEST_CASE("thread count does not change the emitted trace") {
  ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "linear-bg", "n": 64, "m": 32, "batch": 16, "iterations": 5, "seed": 4,
          "fisher_mode_b": "minibatch"})");
  const auto dir1 = fresh_dir("threads1");
  const auto dir4 = fresh_dir("threads4");
  c.threads = 1;
  const RunArtifacts a1 = run_experiment(c, dir1);
  c.threads = 4;
  const RunArtifacts a4 = run_experiment(c, dir4);
  CHECK(slurp(a1.trace_csv) == slurp(a4.trace_csv));
}

TEST_CASE("se-only trace carries the initialization row") {
  const ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "se-only", "n": 100, "m": 50, "iterations": 6,
          "prior": {"kind": "bernoulli-gaussian", "sparsity": 0.2, "active_variance": 1.0}})");
  const auto dir = fresh_dir("seonly");
  const RunArtifacts artifacts = run_experiment(c, dir);
  const std::string trace = slurp(artifacts.trace_csv);
  CHECK(trace.find("\n0,") != std::string::npos);
  const json summary = json::parse(artifacts.summary_text);
  CHECK(summary["results"].contains("final_mse_se"));
}

TEST_CASE("exit pipeline emits both curves and the staircase") {
  const ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "exit", "n": 1, "m": 1, "prior": {"kind": "gaussian", "power": 1.0},
          "noise_variance": 0.25, "exit_grid_points": 12})");
  const auto dir = fresh_dir("exit");
  const RunArtifacts artifacts = run_experiment(c, dir);
  const std::string exit_text = slurp(artifacts.exit_csv);
  CHECK(exit_text.find("curve_a,") != std::string::npos);
  CHECK(exit_text.find("curve_b,") != std::string::npos);
  CHECK(exit_text.find("staircase,") != std::string::npos);
  const json summary = json::parse(artifacts.summary_text);
  CHECK(summary["results"]["fixed_point_v_in_b"].get<double>() ==
        doctest::Approx(0.25).epsilon(1e-9));
  CHECK(summary["results"]["fixed_point_v_in_a"].get<double>() ==
        doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("diagnostics pipeline reports the captured-error statistics") {
  const ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "diagnostics", "n": 400, "m": 200, "batch": 50, "iterations": 5,
          "seed": 11, "prior": {"kind": "bernoulli-gaussian", "sparsity": 0.1,
          "active_variance": 1.0}})");
  const auto dir = fresh_dir("diag");
  const RunArtifacts artifacts = run_experiment(c, dir);
  CHECK(std::filesystem::exists(artifacts.diagnostics_json));
  const json diag = json::parse(slurp(artifacts.diagnostics_json));
  CHECK(diag["capture_iteration"] == 3);
  CHECK(diag["sample_count"] == 400 * 50);
  CHECK(diag.contains("kl_nats"));
  CHECK(diag.contains("excess_kurtosis"));
}

TEST_CASE("langevin demo runs and reduces the error") {
  const ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "langevin-demo", "n": 8, "m": 8, "batch": 3, "iterations": 3,
          "seed": 12, "noise_variance": 0.3, "prior": {"kind": "gaussian", "power": 1.0},
          "langevin": {"forward": "tanh", "steps": 1200, "burn_in": 300, "particles": 8}})");
  const auto dir = fresh_dir("demo");
  const RunArtifacts artifacts = run_experiment(c, dir);
  const json summary = json::parse(artifacts.summary_text);
  const double final_mse = summary["results"]["final_mse_actual"].get<double>();
  CHECK(final_mse > 0.0);
  CHECK(final_mse < 1.0);  // well below the prior variance
}

TEST_CASE("train-score writes a loadable, reproducible weight file") {
  const ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "correlated-learned", "seed": 21,
          "prior": {"kind": "pairwise-gaussian", "variance": 1.0, "correlation": 0.9},
          "dsm": {"iterations": 200, "batch": 32}})");
  const auto dir1 = fresh_dir("train1");
  const auto dir2 = fresh_dir("train2");
  const RunArtifacts t1 = train_score_command(c, dir1);
  const RunArtifacts t2 = train_score_command(c, dir2);
  CHECK(slurp(t1.weights_file) == slurp(t2.weights_file));  // byte-identical weights

  const MlpScoreNet net = load_weights(t1.weights_file);
  CHECK(net.arch == std::vector<int>{3, 128, 128, 128, 2});
  const json report = json::parse(t1.summary_text);
  CHECK(report["results"].contains("final_loss"));
  CHECK(report["results"].contains("score_rel_rms_vs_analytic"));
  CHECK(report["results"]["checkpoints"].is_array());

  // The weight file feeds the correlated-learned pipeline end to end.
  ExperimentConfig run_c = parse_experiment_config(
      R"({"experiment": "correlated-learned", "n": 32, "m": 16, "batch": 12, "iterations": 3,
          "seed": 22, "prior": {"kind": "pairwise-gaussian", "variance": 1.0,
          "correlation": 0.9}, "se_mc_batch": 8})");
  run_c.dsm.weights = t1.weights_file.string();
  const auto dir3 = fresh_dir("learnedrun");
  const RunArtifacts run_artifacts = run_experiment(run_c, dir3);
  const json summary = json::parse(run_artifacts.summary_text);
  CHECK(summary["results"].contains("final_mse_actual"));
  CHECK(summary["results"].contains("final_mse_se"));
}

TEST_CASE("bg trace variance decreases monotonically after the first iteration") {
  const ExperimentConfig c = parse_experiment_config(
      R"({"experiment": "linear-bg", "n": 512, "m": 256, "batch": 64, "iterations": 14,
          "seed": 15, "snr_db": 20.0,
          "prior": {"kind": "bernoulli-gaussian", "sparsity": 0.1, "active_variance": 1.0}})");
  const auto dir = fresh_dir("monotone");
  const RunArtifacts artifacts = run_experiment(c, dir);
  std::istringstream trace(slurp(artifacts.trace_csv));
  std::string line;
  std::getline(trace, line);
  std::getline(trace, line);
  double prev = -1.0;
  int idx = 0;
  while (std::getline(trace, line)) {
    double v_in_b = 0.0;
    int iter = 0;
    std::sscanf(line.c_str(), "%d,%*f,%*f,%lf", &iter, &v_in_b);
    // Non-increasing descent; once converged the variance jitters at the
    // percent level around the fixed point, hence the 2% slack.
    if (idx >= 1) CHECK(v_in_b <= prev * 1.02);
    prev = v_in_b;
    ++idx;
  }
  CHECK(idx >= 6);
}

TEST_CASE("implicit-denoiser score selection reproduces the analytic run") {
  const std::string base =
      R"({"experiment": "linear-bg", "n": 64, "m": 32, "batch": 16, "iterations": 5,
          "seed": 14, "fisher_mode_b": "minibatch",
          "prior": {"kind": "bernoulli-gaussian", "sparsity": 0.1, "active_variance": 1.0})";
  const ExperimentConfig analytic = parse_experiment_config(base + "}");
  const ExperimentConfig implicit =
      parse_experiment_config(base + R"(, "score_b": "implicit-denoiser"})");
  const RunArtifacts a = run_experiment(analytic, fresh_dir("impl_a"));
  const RunArtifacts b = run_experiment(implicit, fresh_dir("impl_b"));
  const double mse_a = json::parse(a.summary_text)["results"]["final_mse_actual"].get<double>();
  const double mse_b = json::parse(b.summary_text)["results"]["final_mse_actual"].get<double>();
  // The implicit score is the analytic one up to the Tweedie round-trip
  // cancellation, so the runs agree to floating-point noise.
  CHECK(mse_b == doctest::Approx(mse_a).epsilon(1e-8));
}

#ifdef SCVAMP_CLI_PATH
TEST_CASE("cli subcommands: exit codes, determinism, field-level errors") {
  const auto dir = fresh_dir("cli");
  const auto config_path = dir / "config.json";
  {
    std::ofstream f(config_path);
    f << R"({"experiment": "scalar-gaussian", "batch": 200, "iterations": 3, "seed": 5})";
  }
  const std::string cli = SCVAMP_CLI_PATH;
  auto shell = [&](const std::string& cmd) { return std::system(cmd.c_str()); };

  const auto out1 = dir / "o1";
  const auto out2 = dir / "o2";
  CHECK(shell(cli + " run --config " + config_path.string() + " --out " + out1.string() +
              " > /dev/null 2>&1") == 0);
  CHECK(shell(cli + " run --config " + config_path.string() + " --out " + out2.string() +
              " > /dev/null 2>&1") == 0);
  CHECK(slurp(out1 / "trace.csv") == slurp(out2 / "trace.csv"));

  // SCVAMP_THREADS fallback must not change the trace either.
  const auto out3 = dir / "o3";
  CHECK(shell("SCVAMP_THREADS=4 " + cli + " run --config " + config_path.string() + " --out " +
              out3.string() + " > /dev/null 2>&1") == 0);
  CHECK(slurp(out1 / "trace.csv") == slurp(out3 / "trace.csv"));

  // Seed override changes the outputs.
  const auto out4 = dir / "o4";
  CHECK(shell(cli + " run --config " + config_path.string() + " --seed 77 --out " +
              out4.string() + " > /dev/null 2>&1") == 0);
  CHECK(slurp(out1 / "trace.csv") != slurp(out4 / "trace.csv"));

  // Invalid config: non-zero exit, message names the field.
  const auto bad_path = dir / "bad.json";
  {
    std::ofstream f(bad_path);
    f << R"({"experiment": "linear-bg", "wat": true})";
  }
  const auto err_file = dir / "err.txt";
  const int rc = shell(cli + " run --config " + bad_path.string() + " --out " + dir.string() +
                       " 2> " + err_file.string() + " > /dev/null");
  CHECK(rc != 0);
  CHECK(slurp(err_file).find("wat") != std::string::npos);

  // se subcommand forces the pipeline regardless of the config's kind.
  const auto out5 = dir / "o5";
  CHECK(shell(cli + " se --config " + config_path.string() + " --out " + out5.string() +
              " > /dev/null 2>&1") == 0);
  const json summary = json::parse(slurp(out5 / "summary.json"));
  CHECK(summary["experiment"] == "se-only");
}
#endif
