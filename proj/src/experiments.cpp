#include "scvamp/experiments.hpp"

#include "scvamp/diagnostics.hpp"
#include "scvamp/dsm.hpp"
#include "scvamp/langevin.hpp"
#include "scvamp/random_matrix.hpp"
#include "scvamp/scvamp.hpp"
#include "scvamp/state_evolution.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace scvamp {

namespace {

using nlohmann::json;

[[noreturn]] void config_fail(const std::string& field, const std::string& what) {
  throw std::invalid_argument("config field '" + field + "': " + what);
}

void check_keys(const json& j, const std::string& scope,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* key : allowed)
      if (it.key() == key) {
        known = true;
        break;
      }
    if (!known) config_fail(scope.empty() ? it.key() : scope + "." + it.key(), "unknown key");
  }
}

template <class T>
T get_number(const json& j, const std::string& scope, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number() && !v.is_boolean())
    config_fail(scope.empty() ? key : scope + "." + key, "expected a number");
  return v.get<T>();
}

bool get_bool(const json& j, const std::string& scope, const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_boolean()) config_fail(scope.empty() ? key : scope + "." + key, "expected a boolean");
  return v.get<bool>();
}

std::string get_string(const json& j, const std::string& scope, const char* key,
                       const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_string()) config_fail(scope.empty() ? key : scope + "." + key, "expected a string");
  return v.get<std::string>();
}

std::string format_double(double x) {
  char buf[40];
  const auto result = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, result.ptr);
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f << contents;
  }
  std::filesystem::rename(tmp, path);
}

ExperimentConfig kind_defaults(const std::string& kind) {
  ExperimentConfig c;
  c.experiment = kind;
  if (kind == "scalar-gaussian") {
    c.n = 1;
    c.m = 1;
    c.batch = 10000;
    c.iterations = 8;
    c.prior.kind = "gaussian";
    c.noise_variance = 0.25;
  } else if (kind == "correlated-learned") {
    c.batch = 1000;
    c.prior.kind = "pairwise-gaussian";
    c.score_b = "learned-mlp";
    c.se_mc_batch = 100;  // 1e5 scalar pairs at n = 2000
  } else if (kind == "langevin-demo") {
    c.n = 12;
    c.m = 12;
    c.batch = 4;
    c.iterations = 5;
    c.prior.kind = "gaussian";
  } else if (kind == "diagnostics") {
    c.capture_errors_iteration = 3;
  }
  return c;
}

const std::vector<std::string> kExperiments = {
    "scalar-gaussian", "linear-bg",   "correlated-learned", "langevin-demo",
    "se-only",         "exit",        "diagnostics"};

FisherMode parse_fisher_mode(const std::string& text, const char* field) {
  if (text == "auto") return FisherMode::kAuto;
  if (text == "minibatch") return FisherMode::kMinibatch;
  if (text == "exact") return FisherMode::kExact;
  config_fail(field, "expected one of auto|minibatch|exact");
}

double prior_marginal_variance(const PriorConfig& prior) {
  if (prior.kind == "gaussian") return prior.power;
  if (prior.kind == "bernoulli-gaussian") return prior.sparsity * prior.active_variance;
  if (prior.kind == "pairwise-gaussian") return prior.variance;
  config_fail("prior.kind", "unknown prior kind '" + prior.kind + "'");
}

}  // namespace

std::string trace_schema_line() { return "# scvamp trace schema v1"; }

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object");
  check_keys(doc, "",
             {"experiment", "n", "m", "batch", "iterations", "seed", "snr_db", "snr_convention",
              "noise_variance", "prior", "score_b", "calibration", "calibration_a",
              "calibration_b", "fisher_mode_a", "fisher_mode_b", "v_init", "damping",
              "stop_tolerance", "capture_errors_iteration", "se_nodes", "se_mc_batch", "spectrum",
              "singular_values", "exit_grid_min", "exit_grid_max", "exit_grid_points",
              "diagnostics_lags", "dsm", "langevin", "threads", "output"});

  const std::string kind = get_string(doc, "", "experiment", "linear-bg");
  if (std::find(kExperiments.begin(), kExperiments.end(), kind) == kExperiments.end())
    config_fail("experiment", "unknown experiment '" + kind + "'");
  ExperimentConfig c = kind_defaults(kind);

  c.n = get_number<long>(doc, "", "n", c.n);
  c.m = get_number<long>(doc, "", "m", c.m);
  c.batch = get_number<int>(doc, "", "batch", c.batch);
  c.iterations = get_number<int>(doc, "", "iterations", c.iterations);
  c.seed = get_number<std::uint64_t>(doc, "", "seed", c.seed);
  c.snr_db = get_number<double>(doc, "", "snr_db", c.snr_db);
  c.snr_convention = get_string(doc, "", "snr_convention", c.snr_convention);
  c.noise_variance = get_number<double>(doc, "", "noise_variance", c.noise_variance);
  c.score_b = get_string(doc, "", "score_b", c.score_b);

  if (doc.contains("prior")) {
    const json& p = doc.at("prior");
    if (!p.is_object()) config_fail("prior", "expected an object");
    check_keys(p, "prior",
               {"kind", "power", "sparsity", "active_variance", "variance", "correlation"});
    c.prior.kind = get_string(p, "prior", "kind", c.prior.kind);
    c.prior.power = get_number<double>(p, "prior", "power", c.prior.power);
    c.prior.sparsity = get_number<double>(p, "prior", "sparsity", c.prior.sparsity);
    c.prior.active_variance =
        get_number<double>(p, "prior", "active_variance", c.prior.active_variance);
    c.prior.variance = get_number<double>(p, "prior", "variance", c.prior.variance);
    c.prior.correlation = get_number<double>(p, "prior", "correlation", c.prior.correlation);
  }

  // Stein calibration defaults on for the learned module only. The -N moment
  // constraint is a property of unconditional smoothed-marginal scores; the
  // observation module's flat-prior conditional score does not satisfy it
  // (its input-score moment heads to zero near self-consistency, so the
  // rescale blows up), hence analytic module A stays uncalibrated unless
  // explicitly requested.
  c.calibration_b = c.score_b == "learned-mlp";
  if (doc.contains("calibration")) {
    const bool master = get_bool(doc, "", "calibration", false);
    c.calibration_a = master;
    c.calibration_b = master;
  }
  c.calibration_a = get_bool(doc, "", "calibration_a", c.calibration_a);
  c.calibration_b = get_bool(doc, "", "calibration_b", c.calibration_b);
  c.fisher_mode_a = get_string(doc, "", "fisher_mode_a", c.fisher_mode_a);
  c.fisher_mode_b = get_string(doc, "", "fisher_mode_b", c.fisher_mode_b);
  (void)parse_fisher_mode(c.fisher_mode_a, "fisher_mode_a");
  (void)parse_fisher_mode(c.fisher_mode_b, "fisher_mode_b");

  c.v_init = get_number<double>(doc, "", "v_init", c.v_init);
  c.damping = get_number<double>(doc, "", "damping", c.damping);
  c.stop_tolerance = get_number<double>(doc, "", "stop_tolerance", c.stop_tolerance);
  c.capture_errors_iteration =
      get_number<int>(doc, "", "capture_errors_iteration", c.capture_errors_iteration);
  c.se_nodes = get_number<int>(doc, "", "se_nodes", c.se_nodes);
  c.se_mc_batch = get_number<int>(doc, "", "se_mc_batch", c.se_mc_batch);
  c.spectrum = get_string(doc, "", "spectrum", c.spectrum);
  if (doc.contains("singular_values")) {
    const json& sv = doc.at("singular_values");
    if (!sv.is_array()) config_fail("singular_values", "expected an array of numbers");
    c.singular_values.clear();
    for (const auto& x : sv) {
      if (!x.is_number()) config_fail("singular_values", "expected an array of numbers");
      c.singular_values.push_back(x.get<double>());
    }
  }
  c.exit_grid_min = get_number<double>(doc, "", "exit_grid_min", c.exit_grid_min);
  c.exit_grid_max = get_number<double>(doc, "", "exit_grid_max", c.exit_grid_max);
  c.exit_grid_points = get_number<int>(doc, "", "exit_grid_points", c.exit_grid_points);
  c.diagnostics_lags = get_number<int>(doc, "", "diagnostics_lags", c.diagnostics_lags);
  c.threads = get_number<int>(doc, "", "threads", c.threads);
  c.output = get_string(doc, "", "output", c.output);

  if (doc.contains("dsm")) {
    const json& d = doc.at("dsm");
    if (!d.is_object()) config_fail("dsm", "expected an object");
    check_keys(d, "dsm",
               {"sigma_min", "sigma_max", "iterations", "batch", "lr0", "antithetic", "weights"});
    c.dsm.sigma_min = get_number<double>(d, "dsm", "sigma_min", c.dsm.sigma_min);
    c.dsm.sigma_max = get_number<double>(d, "dsm", "sigma_max", c.dsm.sigma_max);
    c.dsm.iterations = get_number<long>(d, "dsm", "iterations", c.dsm.iterations);
    c.dsm.batch = get_number<int>(d, "dsm", "batch", c.dsm.batch);
    c.dsm.lr0 = get_number<double>(d, "dsm", "lr0", c.dsm.lr0);
    c.dsm.antithetic = get_bool(d, "dsm", "antithetic", c.dsm.antithetic);
    c.dsm.weights = get_string(d, "dsm", "weights", c.dsm.weights);
  }
  if (doc.contains("langevin")) {
    const json& l = doc.at("langevin");
    if (!l.is_object()) config_fail("langevin", "expected an object");
    check_keys(l, "langevin",
               {"forward", "clip_limit", "step_size", "steps", "burn_in", "particles",
                "warm_start", "step_decay"});
    c.langevin.forward = get_string(l, "langevin", "forward", c.langevin.forward);
    c.langevin.clip_limit = get_number<double>(l, "langevin", "clip_limit", c.langevin.clip_limit);
    c.langevin.step_size = get_number<double>(l, "langevin", "step_size", c.langevin.step_size);
    c.langevin.steps = get_number<int>(l, "langevin", "steps", c.langevin.steps);
    c.langevin.burn_in = get_number<int>(l, "langevin", "burn_in", c.langevin.burn_in);
    c.langevin.particles = get_number<int>(l, "langevin", "particles", c.langevin.particles);
    c.langevin.warm_start = get_bool(l, "langevin", "warm_start", c.langevin.warm_start);
    c.langevin.step_decay = get_string(l, "langevin", "step_decay", c.langevin.step_decay);
  }

  // Cross-field validation with field-level messages.
  if (c.n < 1) config_fail("n", "must be >= 1");
  if (c.m < 1) config_fail("m", "must be >= 1");
  if (c.batch < 1) config_fail("batch", "must be >= 1");
  if (c.iterations < 0) config_fail("iterations", "must be >= 0");
  if (c.snr_convention != "received-power" && c.snr_convention != "per-component")
    config_fail("snr_convention", "expected received-power|per-component");
  (void)prior_marginal_variance(c.prior);
  if (c.prior.kind == "pairwise-gaussian" && c.n % 2 != 0)
    config_fail("n", "pairwise prior needs an even dimension");
  if (c.score_b != "analytic" && c.score_b != "learned-mlp" && c.score_b != "implicit-denoiser")
    config_fail("score_b", "expected analytic|learned-mlp|implicit-denoiser");
  if (c.score_b == "learned-mlp" && c.prior.kind != "pairwise-gaussian")
    config_fail("score_b", "learned-mlp requires the pairwise-gaussian prior");
  if (!c.singular_values.empty() &&
      static_cast<long>(c.singular_values.size()) != std::min(c.m, c.n))
    config_fail("singular_values", "need exactly min(m, n) values");
  if (c.spectrum != "unit" && c.spectrum != "explicit")
    config_fail("spectrum", "expected unit|explicit");
  if (c.spectrum == "explicit" && c.singular_values.empty())
    config_fail("singular_values", "explicit spectrum requires values");
  if (c.experiment == "scalar-gaussian") {
    if (c.prior.kind != "gaussian") config_fail("prior.kind", "scalar-gaussian needs gaussian");
    if (c.n != 1 || c.m != 1) config_fail("n", "scalar-gaussian is one-dimensional");
  }
  if (c.experiment == "correlated-learned" && c.prior.kind != "pairwise-gaussian")
    config_fail("prior.kind", "correlated-learned needs pairwise-gaussian");
  if (c.experiment == "langevin-demo") {
    if (c.langevin.forward != "linear" && c.langevin.forward != "tanh" &&
        c.langevin.forward != "clip")
      config_fail("langevin.forward", "expected linear|tanh|clip");
    if (c.langevin.forward != "linear" && c.n != c.m)
      config_fail("m", "componentwise forward models need m == n");
  }
  if (c.threads < 1) config_fail("threads", "must be >= 1");
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << f.rdbuf();
  return parse_experiment_config(buffer.str());
}

std::string serialize_experiment_config(const ExperimentConfig& c) {
  json doc;
  doc["experiment"] = c.experiment;
  doc["n"] = c.n;
  doc["m"] = c.m;
  doc["batch"] = c.batch;
  doc["iterations"] = c.iterations;
  doc["seed"] = c.seed;
  doc["snr_db"] = c.snr_db;
  doc["snr_convention"] = c.snr_convention;
  doc["noise_variance"] = c.noise_variance;
  doc["prior"] = {{"kind", c.prior.kind},
                  {"power", c.prior.power},
                  {"sparsity", c.prior.sparsity},
                  {"active_variance", c.prior.active_variance},
                  {"variance", c.prior.variance},
                  {"correlation", c.prior.correlation}};
  doc["score_b"] = c.score_b;
  doc["calibration_a"] = c.calibration_a;
  doc["calibration_b"] = c.calibration_b;
  doc["fisher_mode_a"] = c.fisher_mode_a;
  doc["fisher_mode_b"] = c.fisher_mode_b;
  doc["v_init"] = c.v_init;
  doc["damping"] = c.damping;
  doc["stop_tolerance"] = c.stop_tolerance;
  doc["capture_errors_iteration"] = c.capture_errors_iteration;
  doc["se_nodes"] = c.se_nodes;
  doc["se_mc_batch"] = c.se_mc_batch;
  doc["spectrum"] = c.spectrum;
  doc["singular_values"] = c.singular_values;
  doc["exit_grid_min"] = c.exit_grid_min;
  doc["exit_grid_max"] = c.exit_grid_max;
  doc["exit_grid_points"] = c.exit_grid_points;
  doc["diagnostics_lags"] = c.diagnostics_lags;
  doc["dsm"] = {{"sigma_min", c.dsm.sigma_min},   {"sigma_max", c.dsm.sigma_max},
                {"iterations", c.dsm.iterations}, {"batch", c.dsm.batch},
                {"lr0", c.dsm.lr0},               {"antithetic", c.dsm.antithetic},
                {"weights", c.dsm.weights}};
  doc["langevin"] = {{"forward", c.langevin.forward},
                     {"clip_limit", c.langevin.clip_limit},
                     {"step_size", c.langevin.step_size},
                     {"steps", c.langevin.steps},
                     {"burn_in", c.langevin.burn_in},
                     {"particles", c.langevin.particles},
                     {"warm_start", c.langevin.warm_start},
                     {"step_decay", c.langevin.step_decay}};
  doc["threads"] = c.threads;
  doc["output"] = c.output;
  return doc.dump(2) + "\n";
}

std::string experiment_config_hash(const ExperimentConfig& c) {
  const std::string canonical = serialize_experiment_config(c);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

struct MergedRow {
  int iter = 0;
  double v_in_a = 0, v_out_a = 0, v_in_b = 0, v_out_b = 0;
  double alpha_a = 0, alpha_b = 0;
  double fisher_a = 0, fisher_b = 0;
  double calib_a = 1, calib_b = 1;
  double mse_actual = std::numeric_limits<double>::quiet_NaN();
  double mse_se = std::numeric_limits<double>::quiet_NaN();
  int clip_events = 0;
};

std::string render_trace_csv(const std::vector<MergedRow>& rows) {
  std::ostringstream out;
  out << trace_schema_line() << "\n";
  out << "iter,v_in_A,v_out_A,v_in_B,v_out_B,alpha_A,alpha_B,fisher_A,fisher_B,calib_A,calib_B,"
         "mse_actual,mse_se,clip_events\n";
  for (const auto& r : rows) {
    out << r.iter << ',' << format_double(r.v_in_a) << ',' << format_double(r.v_out_a) << ','
        << format_double(r.v_in_b) << ',' << format_double(r.v_out_b) << ','
        << format_double(r.alpha_a) << ',' << format_double(r.alpha_b) << ','
        << format_double(r.fisher_a) << ',' << format_double(r.fisher_b) << ','
        << format_double(r.calib_a) << ',' << format_double(r.calib_b) << ','
        << format_double(r.mse_actual) << ',' << format_double(r.mse_se) << ',' << r.clip_events
        << "\n";
  }
  return out.str();
}

std::vector<MergedRow> merge_rows(const RunTrace& run, const SeTrace& se, long n) {
  std::vector<MergedRow> rows;
  for (const auto& r : run.rows) {
    MergedRow m;
    m.iter = r.iter;
    m.v_in_a = r.v_in_a;
    m.v_out_a = r.v_out_a;
    m.v_in_b = r.v_in_b;
    m.v_out_b = r.v_out_b;
    m.alpha_a = r.alpha_a;
    m.alpha_b = r.alpha_b;
    m.fisher_a = r.fisher_a;
    m.fisher_b = r.fisher_b;
    m.calib_a = r.calibration_a;
    m.calib_b = r.calibration_b;
    m.mse_actual = r.mse;
    m.clip_events = r.clip_events;
    for (const auto& s : se.rows)
      if (s.iter == r.iter) m.mse_se = s.predicted_mse;
    rows.push_back(m);
  }
  (void)n;
  return rows;
}

std::vector<MergedRow> se_rows_only(const SeTrace& se, long n) {
  std::vector<MergedRow> rows;
  for (const auto& s : se.rows) {
    MergedRow m;
    m.iter = s.iter;
    m.v_in_a = s.v_in_a;
    m.v_out_a = s.v_out_a;
    m.v_in_b = s.v_in_b;
    m.v_out_b = s.v_out_b;
    m.alpha_a = s.alpha_a;
    m.alpha_b = s.alpha_b;
    // Fisher implied by alpha = 1 - (v/N) J.
    m.fisher_a = s.iter == 0 ? 0.0 : (1.0 - s.alpha_a) * static_cast<double>(n) / s.v_in_a;
    m.fisher_b = s.iter == 0 ? 0.0 : (1.0 - s.alpha_b) * static_cast<double>(n) / s.v_in_b;
    m.mse_se = s.predicted_mse;
    rows.push_back(m);
  }
  return rows;
}

const char* kPlotStub = R"PY(#!/usr/bin/env python3
"""Plot helper for trace.csv / exit_curves.csv produced by the scvamp CLI."""
import csv
import os
import sys

import matplotlib.pyplot as plt


def read_rows(path):
    with open(path) as f:
        rows = [r for r in csv.DictReader(l for l in f if not l.startswith("#"))]
    return rows


def main(out_dir="."):
    trace = os.path.join(out_dir, "trace.csv")
    if os.path.exists(trace):
        rows = read_rows(trace)
        it = [int(r["iter"]) for r in rows]
        for col, style in (("mse_actual", "o-"), ("mse_se", "x--")):
            ys = [float(r[col]) for r in rows]
            if any(y == y for y in ys):
                plt.semilogy(it, ys, style, label=col)
        plt.xlabel("iteration")
        plt.ylabel("MSE")
        plt.legend()
        plt.savefig(os.path.join(out_dir, "trace.png"), dpi=150)
        plt.close()
    exit_csv = os.path.join(out_dir, "exit_curves.csv")
    if os.path.exists(exit_csv):
        rows = read_rows(exit_csv)
        # Log-log axes; the variance grids span decades.
        for series, style in (("curve_a", "-"), ("curve_b", "-"), ("staircase", ".--")):
            xs = [float(r["v_in"]) for r in rows if r["series"] == series]
            ys = [float(r["v_out"]) for r in rows if r["series"] == series]
            if xs:
                plt.loglog(xs, ys, style, label=series)
        plt.xlabel("v_in_A")
        plt.ylabel("v_out_A")
        plt.legend()
        plt.savefig(os.path.join(out_dir, "exit.png"), dpi=150)
        plt.close()


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
)PY";

struct SystemSetup {
  Vector spectrum;
  double noise_variance = 0.0;
  double signal_variance = 0.0;
  double v_init = 0.0;
  ScoreModel prior_model;  // module B
  MmseFunction mmse_a, mmse_b;
};

ScoreModel build_analytic_prior_model(const PriorConfig& prior) {
  if (prior.kind == "gaussian") return make_gaussian_prior_model({prior.power});
  if (prior.kind == "bernoulli-gaussian")
    return make_bg_prior_model({prior.sparsity, prior.active_variance});
  return make_pairwise_gaussian_model({prior.variance, prior.correlation});
}

ScoreModel build_prior_model(const ExperimentConfig& c) {
  if (c.score_b == "learned-mlp") {
    if (c.dsm.weights.empty())
      config_fail("dsm.weights", "learned-mlp requires a weight file path");
    MlpScoreNet net = load_weights(c.dsm.weights);
    const PairwiseGaussianParams p{c.prior.variance, c.prior.correlation};
    const ScoreModel sampler_source = make_pairwise_gaussian_model(p);
    return make_learned_pairwise_model(std::move(net), sampler_source.sample_prior);
  }
  if (c.score_b == "implicit-denoiser") {
    // Drive module B through the implicit score of the analytic Tweedie
    // denoiser; exercises the denoiser-adapter path end to end.
    ScoreModel analytic = build_analytic_prior_model(c.prior);
    auto denoiser = [score = analytic.score](const Vector& x, double v) {
      return (x + v * score(x, v, nullptr)).eval();
    };
    ScoreModel implicit = make_implicit_denoiser_model(std::move(denoiser));
    implicit.sample_prior = analytic.sample_prior;
    return implicit;
  }
  return build_analytic_prior_model(c.prior);
}

SystemSetup build_system(const ExperimentConfig& c) {
  SystemSetup s;
  const long k = std::min(c.m, c.n);
  if (!c.singular_values.empty()) {
    s.spectrum.resize(k);
    for (long i = 0; i < k; ++i) s.spectrum[i] = c.singular_values[static_cast<std::size_t>(i)];
  } else {
    s.spectrum = Vector::Ones(k);
  }
  s.signal_variance = prior_marginal_variance(c.prior);
  if (c.noise_variance > 0.0) {
    s.noise_variance = c.noise_variance;
  } else {
    const double snr = std::pow(10.0, c.snr_db / 10.0);
    if (c.snr_convention == "received-power") {
      // sigma_n^2 = E||Ax||^2 / (M 10^(SNR/10)), with E||Ax||^2 = sum d_i^2 var.
      s.noise_variance =
          s.spectrum.squaredNorm() * s.signal_variance / (static_cast<double>(c.m) * snr);
    } else {
      s.noise_variance = s.signal_variance / snr;
    }
  }
  s.v_init = c.v_init > 0.0 ? c.v_init : s.signal_variance;
  s.prior_model = build_prior_model(c);
  s.mmse_a = make_linear_mmse(s.spectrum, s.noise_variance, c.n);
  if (c.score_b == "learned-mlp") {
    RngStream root(c.seed);
    (void)root;
    s.mmse_b = make_score_model_mmse(s.prior_model, c.n, c.se_mc_batch, c.seed ^ 0x5eed5eedull,
                                     c.calibration_b);
  } else if (c.prior.kind == "gaussian") {
    s.mmse_b = make_gaussian_prior_mmse(c.prior.power);
  } else if (c.prior.kind == "bernoulli-gaussian") {
    s.mmse_b = make_bg_mmse({c.prior.sparsity, c.prior.active_variance}, c.se_nodes);
  } else {
    s.mmse_b = make_pairwise_mmse({c.prior.variance, c.prior.correlation});
  }
  return s;
}

ScVampConfig to_scvamp_config(const ExperimentConfig& c, double v_init) {
  ScVampConfig run;
  run.max_iterations = c.iterations;
  run.v_init = v_init;
  run.damping = c.damping;
  run.stop_tolerance = c.stop_tolerance;
  run.record_mse = true;
  run.capture_errors_iteration = c.capture_errors_iteration;
  run.threads = c.threads;
  run.siso_a.stein_calibration = c.calibration_a;
  run.siso_b.stein_calibration = c.calibration_b;
  run.siso_a.fisher_mode = parse_fisher_mode(c.fisher_mode_a, "fisher_mode_a");
  run.siso_b.fisher_mode = parse_fisher_mode(c.fisher_mode_b, "fisher_mode_b");
  run.siso_a.batch_size = c.batch;
  run.siso_b.batch_size = c.batch;
  return run;
}

/// Shared sensing matrix + per-instance signals/observations.
struct GeneratedProblem {
  SensingMatrix matrix;
  ProblemBatch batch;
};

GeneratedProblem generate_linear_problem(const ExperimentConfig& c, const SystemSetup& s) {
  RngStream root(c.seed);
  RngStream matrix_rng = root.split("matrix");
  SensingMatrix a = build_rri_matrix(matrix_rng, c.m, c.n, s.spectrum);
  ProblemBatch batch;
  batch.n = c.n;
  for (int i = 0; i < c.batch; ++i) {
    RngStream sig = root.split("signal/" + std::to_string(i));
    RngStream noise = root.split("noise/" + std::to_string(i));
    Vector x = s.prior_model.sample_prior ? s.prior_model.sample_prior(sig, c.n)
                                          : sample_gaussian_vector(sig, c.n, 0.0, 1.0);
    Vector y = a.apply(x) + sample_gaussian_vector(noise, c.m, 0.0, s.noise_variance);
    batch.truth.push_back(std::move(x));
    batch.observation.push_back(std::move(y));
  }
  return {std::move(a), std::move(batch)};
}

json base_summary(const ExperimentConfig& c, const SystemSetup* s) {
  json summary;
  summary["version"] = std::string(kVersion);
  summary["experiment"] = c.experiment;
  summary["seed"] = c.seed;
  summary["config_hash"] = experiment_config_hash(c);
  summary["config"] = json::parse(serialize_experiment_config(c));
  if (s != nullptr) {
    summary["resolved"] = {{"noise_variance", s->noise_variance},
                           {"signal_variance", s->signal_variance},
                           {"v_init", s->v_init},
                           {"spectrum_energy", s->spectrum.squaredNorm()}};
  }
  return summary;
}

json run_statistics(const RunTrace& trace, const SeTrace& se) {
  json stats;
  stats["iterations_run"] = trace.rows.empty() ? 0 : trace.rows.back().iter;
  stats["converged"] = trace.converged;
  if (!trace.failure.empty()) stats["failure"] = trace.failure;
  int clip_total = 0;
  for (const auto& r : trace.rows) clip_total += r.clip_events;
  stats["clip_events"] = clip_total;
  if (!trace.rows.empty()) {
    stats["final_mse_actual"] = trace.rows.back().mse;
    double max_gap = 0.0;
    bool have_gap = false;
    for (const auto& r : trace.rows) {
      if (r.iter < 2 || !std::isfinite(r.mse)) continue;
      for (const auto& s : se.rows)
        if (s.iter == r.iter && s.predicted_mse > 0.0) {
          max_gap = std::max(max_gap, std::abs(r.mse - s.predicted_mse) / s.predicted_mse);
          have_gap = true;
        }
    }
    if (have_gap) stats["max_rel_gap_from_iter2"] = max_gap;
    // Iterations until the actual MSE settles within 5% of its final value.
    const double final_mse = trace.rows.back().mse;
    if (std::isfinite(final_mse)) {
      int settle = trace.rows.back().iter;
      for (const auto& r : trace.rows)
        if (std::isfinite(r.mse) && std::abs(r.mse - final_mse) <= 0.05 * final_mse) {
          settle = r.iter;
          break;
        }
      stats["iterations_to_within_5pct"] = settle;
    }
  }
  if (!se.rows.empty()) {
    stats["final_mse_se"] = se.rows.back().predicted_mse;
    if (!trace.rows.empty() && std::isfinite(trace.rows.back().mse) &&
        se.rows.back().predicted_mse > 0.0)
      stats["fixed_point_gap"] =
          std::abs(trace.rows.back().mse - se.rows.back().predicted_mse) /
          se.rows.back().predicted_mse;
  }
  return stats;
}

json gaussianity_json(const GaussianityReport& r) {
  return {{"sample_count", r.sample_count},
          {"claimed_variance", r.claimed_variance},
          {"empirical_variance", r.empirical_variance},
          {"excess_kurtosis", r.excess_kurtosis},
          {"kl_nats", r.kl_nats},
          {"kl_window", r.kl_window},
          {"autocorrelations", r.autocorrelations},
          {"max_abs_autocorrelation", r.max_abs_autocorrelation},
          {"pass_variance", r.pass_variance},
          {"pass_kurtosis", r.pass_kurtosis},
          {"pass_kl", r.pass_kl},
          {"pass_autocorrelation", r.pass_autocorrelation},
          {"pass_all", r.pass_all}};
}

}  // namespace

RunArtifacts run_experiment(const ExperimentConfig& c, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  RunArtifacts artifacts;
  const SystemSetup system = build_system(c);
  json summary = base_summary(c, &system);

  SeConfig se_config;
  se_config.max_iterations = c.iterations;
  se_config.v_init = system.v_init;
  se_config.stop_tolerance = c.stop_tolerance;

  std::vector<MergedRow> rows;

  if (c.experiment == "se-only") {
    const SeTrace se = run_se(se_config, system.mmse_a, system.mmse_b);
    rows = se_rows_only(se, c.n);
    summary["results"] = {{"converged", se.converged},
                          {"final_mse_se", se.rows.back().predicted_mse},
                          {"v_star_in_b", se.rows.back().v_in_b}};
  } else if (c.experiment == "exit") {
    const double grid_min = c.exit_grid_min > 0.0 ? c.exit_grid_min : 1e-3 * system.v_init;
    const double grid_max = c.exit_grid_max > 0.0 ? c.exit_grid_max : 10.0 * system.v_init;
    if (grid_min >= grid_max) config_fail("exit_grid_min", "grid bounds are inverted");
    std::vector<double> grid;
    for (int i = 0; i < c.exit_grid_points; ++i)
      grid.push_back(grid_min * std::pow(grid_max / grid_min,
                                         static_cast<double>(i) /
                                             std::max(1, c.exit_grid_points - 1)));
    const ExitCurves curves =
        exit_curves(system.mmse_a, system.mmse_b, grid, system.v_init);
    std::ostringstream out;
    out << "# scvamp exit schema v1\nseries,index,v_in,v_out\n";
    for (std::size_t i = 0; i < curves.curve_a.size(); ++i)
      out << "curve_a," << i << ',' << format_double(curves.curve_a[i].v_in) << ','
          << format_double(curves.curve_a[i].v_out) << "\n";
    for (std::size_t i = 0; i < curves.curve_b.size(); ++i)
      out << "curve_b," << i << ',' << format_double(curves.curve_b[i].v_in) << ','
          << format_double(curves.curve_b[i].v_out) << "\n";
    for (std::size_t i = 0; i < curves.staircase.size(); ++i)
      out << "staircase," << i << ',' << format_double(curves.staircase[i].first) << ','
          << format_double(curves.staircase[i].second) << "\n";
    artifacts.exit_csv = out_dir / "exit_curves.csv";
    atomic_write(artifacts.exit_csv, out.str());
    summary["results"] = {{"fixed_point_v_in_a", curves.fixed_point_v_in_a},
                          {"fixed_point_v_in_b", curves.fixed_point_v_in_b},
                          {"grid_points", c.exit_grid_points}};
  } else if (c.experiment == "scalar-gaussian") {
    const double power = c.prior.power;
    const double sigma2 = system.noise_variance;
    RngStream root(c.seed);
    ProblemBatch batch;
    batch.n = 1;
    for (int i = 0; i < c.batch; ++i) {
      RngStream inst = root.split("instance/" + std::to_string(i));
      Vector x = sample_gaussian_vector(inst, 1, 0.0, power);
      Vector y = x + sample_gaussian_vector(inst, 1, 0.0, sigma2);
      batch.truth.push_back(std::move(x));
      batch.observation.push_back(std::move(y));
    }
    const SensingMatrix identity(Matrix::Identity(1, 1), Vector::Ones(1), Matrix::Identity(1, 1));
    const ScoreModel module_a = make_linear_lmmse_model({identity, sigma2});
    const ScoreModel module_b = system.prior_model;
    const ScVampResult run =
        run_scvamp(to_scvamp_config(c, system.v_init), module_a, module_b, batch);
    const SeTrace se =
        run_se(se_config, make_gaussian_likelihood_mmse(sigma2), system.mmse_b);
    rows = merge_rows(run.trace, se, c.n);

    const FixedPointReport fp = scalar_gaussian_fixed_point(power, sigma2);
    const double gain = power / (power + sigma2);
    double mad = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i)
      mad += std::abs(run.estimates[i][0] - gain * batch.observation[i][0]);
    mad /= static_cast<double>(batch.size());
    summary["results"] = run_statistics(run.trace, se);
    summary["results"]["v_star"] = fp.v_star;
    summary["results"]["mutual_information_nats"] = fp.mutual_information_nats;
    summary["results"]["fixed_point_iterations"] = fp.iterations_to_converge;
    summary["results"]["mad_vs_wiener"] = mad;
  } else if (c.experiment == "linear-bg" || c.experiment == "correlated-learned" ||
             c.experiment == "diagnostics") {
    GeneratedProblem problem = generate_linear_problem(c, system);
    const ScoreModel module_a =
        make_linear_lmmse_model({std::move(problem.matrix), system.noise_variance});
    const ScoreModel& module_b = system.prior_model;
    const ScVampResult run =
        run_scvamp(to_scvamp_config(c, system.v_init), module_a, module_b, problem.batch);
    const SeTrace se = run_se(se_config, system.mmse_a, system.mmse_b);
    rows = merge_rows(run.trace, se, c.n);
    summary["results"] = run_statistics(run.trace, se);

    if (c.capture_errors_iteration >= 1 && run.trace.captured_errors.size() > 0) {
      double v_claimed = 0.0;
      for (const auto& r : run.trace.rows)
        if (r.iter == c.capture_errors_iteration) v_claimed = r.v_in_b;
      const GaussianityReport report = error_decoupling_report(
          run.trace.captured_errors, v_claimed, c.diagnostics_lags);
      artifacts.diagnostics_json = out_dir / "diagnostics.json";
      json diag = gaussianity_json(report);
      diag["capture_iteration"] = c.capture_errors_iteration;
      atomic_write(artifacts.diagnostics_json, diag.dump(2) + "\n");
      summary["diagnostics"] = diag;
    }
    if (!run.trace.failure.empty()) summary["results"]["failure"] = run.trace.failure;
  } else if (c.experiment == "langevin-demo") {
    RngStream root(c.seed);
    const double sn2 = system.noise_variance;
    ForwardModel forward;
    std::optional<SensingMatrix> sensing;
    if (c.langevin.forward == "linear") {
      RngStream matrix_rng = root.split("matrix");
      sensing = build_rri_matrix(matrix_rng, c.m, c.n, system.spectrum);
      forward = make_linear_forward(*sensing, sn2);
    } else if (c.langevin.forward == "tanh") {
      forward = make_tanh_forward(c.n, sn2);
    } else {
      forward = make_clip_forward(c.n, c.langevin.clip_limit, sn2);
    }
    ProblemBatch batch;
    batch.n = c.n;
    for (int i = 0; i < c.batch; ++i) {
      RngStream sig = root.split("signal/" + std::to_string(i));
      RngStream noise = root.split("noise/" + std::to_string(i));
      Vector x = system.prior_model.sample_prior(sig, c.n);
      Vector y = forward.f(x) + sample_gaussian_vector(noise, c.m, 0.0, sn2);
      batch.truth.push_back(std::move(x));
      batch.observation.push_back(std::move(y));
    }

    LangevinConfig lang;
    lang.step_size = c.langevin.step_size;
    lang.steps = c.langevin.steps;
    lang.burn_in = c.langevin.burn_in;
    lang.particles = c.langevin.particles;
    lang.warm_start = c.langevin.warm_start;
    lang.step_decay = c.langevin.step_decay;
    SisoConfig siso_a;
    siso_a.batch_size = c.batch;
    SisoConfig siso_b;
    siso_b.stein_calibration = c.calibration_b;
    siso_b.fisher_mode = parse_fisher_mode(c.fisher_mode_b, "fisher_mode_b");

    // Sampled module A: per-instance Langevin posterior means feed a shared
    // batch Fisher estimate, then the standard extrinsic pipeline; module B
    // is the ordinary score module.
    std::vector<Vector> x_out_b(batch.size(), Vector::Zero(c.n));
    double v_out_b = system.v_init;
    std::vector<Matrix> warm(batch.size());
    for (int t = 1; t <= c.iterations; ++t) {
      const double v_in_a = v_out_b;
      std::vector<Vector> scores(batch.size());
      std::vector<Vector> post(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        RngStream chain_rng =
            root.split("langevin/" + std::to_string(t) + "/" + std::to_string(i));
        const Matrix* warm_ptr = (t > 1 && lang.warm_start) ? &warm[i] : nullptr;
        const LangevinEstimate est =
            posterior_mean_langevin(x_out_b[i], v_in_a, batch.observation[i], forward, lang,
                                    chain_rng, warm_ptr, c.threads);
        warm[i] = est.final_states;
        post[i] = est.posterior_mean;
        scores[i] = (post[i] - x_out_b[i]) / v_in_a;
      }
      const double fisher_a = estimate_fisher_minibatch(scores, c.n);
      bool clipped = false;
      const double alpha_a =
          onsager_coefficient(v_in_a, fisher_a, c.n, siso_a.alpha_clip, &clipped);
      const double v_out_a = v_in_a * alpha_a / (1.0 - alpha_a);
      std::vector<Vector> x_out_a(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i)
        x_out_a[i] = (post[i] - alpha_a * x_out_b[i]) / (1.0 - alpha_a);

      const SisoBatchResult rb =
          siso_forward_batch(system.prior_model, x_out_a, v_out_a, {}, siso_b, c.threads);
      MergedRow row;
      row.iter = t;
      row.v_in_a = v_in_a;
      row.v_out_a = v_out_a;
      row.v_in_b = v_out_a;
      row.v_out_b = rb.extrinsic_variance;
      row.alpha_a = alpha_a;
      row.alpha_b = rb.alpha;
      row.fisher_a = fisher_a;
      row.fisher_b = rb.fisher_estimate;
      row.calib_b = rb.calibration;
      row.clip_events = (clipped ? 1 : 0) + rb.clip_events;
      row.mse_actual = batch_mse(rb.posterior_mean, batch.truth);
      rows.push_back(row);
      x_out_b = rb.extrinsic_mean;
      v_out_b = rb.extrinsic_variance;
    }
    summary["results"] = {{"final_mse_actual", rows.empty() ? -1.0 : rows.back().mse_actual},
                          {"iterations_run", static_cast<int>(rows.size())}};
  }

  if (!rows.empty() || c.experiment == "se-only") {
    artifacts.trace_csv = out_dir / "trace.csv";
    atomic_write(artifacts.trace_csv, render_trace_csv(rows));
  }
  artifacts.plot_script = out_dir / "plot_trace.py";
  atomic_write(artifacts.plot_script, kPlotStub);
  artifacts.summary_json = out_dir / "summary.json";
  artifacts.summary_text = summary.dump(2) + "\n";
  atomic_write(artifacts.summary_json, artifacts.summary_text);
  return artifacts;
}

RunArtifacts train_score_command(const ExperimentConfig& c,
                                 const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  if (c.prior.kind != "pairwise-gaussian")
    config_fail("prior.kind", "train-score expects the pairwise-gaussian prior");
  const PairwiseGaussianParams prior{c.prior.variance, c.prior.correlation};
  const ScoreModel analytic = make_pairwise_gaussian_model(prior);

  DsmConfig dsm;
  dsm.sigma_min = c.dsm.sigma_min;
  dsm.sigma_max = c.dsm.sigma_max;
  dsm.iterations = c.dsm.iterations;
  dsm.batch = c.dsm.batch;
  dsm.lr0 = c.dsm.lr0;
  dsm.antithetic_noise = c.dsm.antithetic;
  dsm.seed = c.seed;
  auto sampler = [&](RngStream& rng, int count) {
    Matrix out(2, count);
    for (int j = 0; j < count; ++j) {
      const Vector pair = analytic.sample_prior(rng, 2);
      out(0, j) = pair[0];
      out(1, j) = pair[1];
    }
    return out;
  };
  auto [net, report] = train_dsm(sampler, dsm);

  RunArtifacts artifacts;
  artifacts.weights_file = out_dir / "weights.json";
  save_weights(net, artifacts.weights_file);

  // Held-out score error against the analytic smoothed score.
  RngStream eval_rng(c.seed ^ 0xeeee1111ull);
  double err = 0.0, ref = 0.0;
  const int held_out = 100000;
  for (int i = 0; i < held_out; ++i) {
    const Vector x0 = analytic.sample_prior(eval_rng, 2);
    const double sigma = 0.1 + 2.9 * eval_rng.uniform01();
    Vector r(2);
    r << x0[0] + sigma * eval_rng.gaussian(), x0[1] + sigma * eval_rng.gaussian();
    const Vector truth = score_pairwise_gaussian(r, sigma * sigma, prior);
    const auto [s1, s2] = mlp_forward(net, r[0], r[1], sigma);
    err += (s1 - truth[0]) * (s1 - truth[0]) + (s2 - truth[1]) * (s2 - truth[1]);
    ref += truth.squaredNorm();
  }
  const double rel_rms = std::sqrt(err / ref);

  json summary = base_summary(c, nullptr);
  summary["results"] = {{"final_loss", report.final_loss},
                        {"wall_clock_seconds", report.wall_clock_seconds},
                        {"aborted", report.aborted},
                        {"weights_file", artifacts.weights_file.string()},
                        {"held_out_pairs", held_out},
                        {"score_rel_rms_vs_analytic", rel_rms}};
  json checkpoints = json::array();
  for (const auto& [step, loss] : report.checkpoints)
    checkpoints.push_back({{"step", step}, {"loss", loss}});
  summary["results"]["checkpoints"] = checkpoints;
  if (report.aborted) summary["results"]["abort_reason"] = report.abort_reason;

  artifacts.summary_json = out_dir / "training_report.json";
  artifacts.summary_text = summary.dump(2) + "\n";
  atomic_write(artifacts.summary_json, artifacts.summary_text);
  return artifacts;
}

}  // namespace scvamp
