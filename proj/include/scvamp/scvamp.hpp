#pragma once

#include "scvamp/siso.hpp"
#include "scvamp/types.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace scvamp {

struct ScVampConfig {
  int max_iterations = 20;
  double v_init = 1.0;
  double damping = 1.0;  // eta_d in (0, 1]; 1 = off
  double stop_tolerance = 1e-8;
  bool record_mse = true;
  SisoConfig siso_a{};
  SisoConfig siso_b{};
  // When >= 1, the module-B input errors x_in_B - x at that iteration are
  // captured (rows = instances) for the decoupling diagnostics.
  int capture_errors_iteration = -1;
  int threads = 1;
};

struct RunTraceRow {
  int iter = 0;
  double v_in_a = 0.0, v_out_a = 0.0, v_in_b = 0.0, v_out_b = 0.0;
  double alpha_a = 0.0, alpha_b = 0.0;
  double fisher_a = 0.0, fisher_b = 0.0;
  double calibration_a = 1.0, calibration_b = 1.0;
  double mse = std::numeric_limits<double>::quiet_NaN();  // batch-averaged, vs truth
  int clip_events = 0;
};

struct RunTrace {
  std::vector<RunTraceRow> rows;
  bool converged = false;
  std::string failure;  // non-empty if the run aborted on a non-finite message
  Matrix captured_errors;  // B x N when capture_errors_iteration fired
};

struct ProblemBatch {
  std::vector<Vector> truth;        // optional; empty or one per instance
  std::vector<Vector> observation;  // one per instance
  Index n = 0;                      // signal dimension (required if truth is empty)

  Index dim() const { return truth.empty() ? n : truth.front().size(); }
  std::size_t size() const { return observation.size(); }
};

/// Module-B output at t = 0: zero mean, v_init variance, for every instance.
inline std::vector<SisoMessage> init_messages(const ScVampConfig& config,
                                              const ProblemBatch& batch) {
  std::vector<SisoMessage> out(batch.size());
  for (auto& msg : out) msg = SisoMessage{Vector::Zero(batch.dim()), config.v_init};
  return out;
}

/// (1/(B N)) sum_i ||xhat_i - x_i||^2, reduced in fixed pairwise order.
inline double batch_mse(const std::vector<Vector>& estimates, const std::vector<Vector>& truths) {
  if (estimates.empty() || estimates.size() != truths.size())
    throw std::invalid_argument("batch_mse: estimate/truth lists must match and be non-empty");
  std::vector<double> sq(estimates.size());
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    if (estimates[i].size() != truths[i].size())
      throw std::invalid_argument("batch_mse: dimension mismatch");
    sq[i] = (estimates[i] - truths[i]).squaredNorm();
  }
  return pairwise_sum(sq) /
         (static_cast<double>(estimates.size()) * static_cast<double>(estimates.front().size()));
}

struct ScVampResult {
  std::vector<Vector> estimates;  // module-B posterior means at the last iteration
  RunTrace trace;
};

namespace detail {
inline bool all_finite(const std::vector<Vector>& vs) {
  for (const auto& v : vs)
    if (!v.allFinite()) return false;
  return true;
}
}  // namespace detail

/// Two-module SC-VAMP loop. Each iteration feeds module B's extrinsic output
/// into module A (conditioned on the observations), then module A's extrinsic
/// output into module B. Optional damping forms the convex combination
/// eta * new + (1 - eta) * old on both extrinsic means and variances. The run
/// stops at max_iterations or once both extrinsic variances move by less than
/// stop_tolerance (relative); a non-finite message aborts with the trace kept
/// up to the failure.
inline ScVampResult run_scvamp(const ScVampConfig& config, const ScoreModel& module_a,
                               const ScoreModel& module_b, const ProblemBatch& batch) {
  if (batch.observation.empty()) throw std::invalid_argument("run_scvamp: empty batch");
  if (!batch.truth.empty() && batch.truth.size() != batch.observation.size())
    throw std::invalid_argument("run_scvamp: truth/observation count mismatch");
  if (!(config.v_init > 0.0)) throw std::invalid_argument("run_scvamp: v_init must be > 0");

  const Index n = batch.dim();
  const std::size_t instances = batch.size();
  const bool have_truth = !batch.truth.empty();

  ScVampResult result;
  result.estimates.assign(instances, Vector::Zero(n));

  std::vector<Vector> x_out_b(instances, Vector::Zero(n));
  double v_out_b = config.v_init;
  std::vector<Vector> x_out_a;
  double v_out_a = 0.0;
  bool have_prev = false;
  double prev_v_out_a = 0.0, prev_v_out_b = 0.0;

  for (int t = 1; t <= config.max_iterations; ++t) {
    const double v_in_a = v_out_b;
    SisoBatchResult ra;
    try {
      ra = siso_forward_batch(module_a, x_out_b, v_in_a, batch.observation, config.siso_a,
                              config.threads);
    } catch (const std::exception& e) {
      result.trace.failure =
          "module A failed at iteration " + std::to_string(t) + ": " + e.what();
      return result;
    }
    double new_v_out_a = ra.extrinsic_variance;
    std::vector<Vector> new_x_out_a = std::move(ra.extrinsic_mean);
    if (config.damping < 1.0 && have_prev) {
      new_v_out_a = config.damping * new_v_out_a + (1.0 - config.damping) * v_out_a;
      for (std::size_t i = 0; i < instances; ++i)
        new_x_out_a[i] = config.damping * new_x_out_a[i] + (1.0 - config.damping) * x_out_a[i];
    }
    v_out_a = new_v_out_a;
    x_out_a = std::move(new_x_out_a);

    RunTraceRow row;
    row.iter = t;
    row.v_in_a = v_in_a;
    row.v_out_a = v_out_a;
    row.alpha_a = ra.alpha;
    row.fisher_a = ra.fisher_estimate;
    row.calibration_a = ra.calibration;
    row.clip_events = ra.clip_events;

    if (!(std::isfinite(v_out_a) && v_out_a > 0.0) || !detail::all_finite(x_out_a)) {
      result.trace.failure = "non-finite message after module A at iteration " + std::to_string(t);
      result.trace.rows.push_back(row);
      return result;
    }

    const double v_in_b = v_out_a;
    if (t == config.capture_errors_iteration && have_truth) {
      result.trace.captured_errors.resize(static_cast<Index>(instances), n);
      for (std::size_t i = 0; i < instances; ++i)
        result.trace.captured_errors.row(static_cast<Index>(i)) =
            (x_out_a[i] - batch.truth[i]).transpose();
    }
    SisoBatchResult rb;
    try {
      rb = siso_forward_batch(module_b, x_out_a, v_in_b, {}, config.siso_b, config.threads);
    } catch (const std::exception& e) {
      result.trace.failure =
          "module B failed at iteration " + std::to_string(t) + ": " + e.what();
      result.trace.rows.push_back(row);
      return result;
    }
    double new_v_out_b = rb.extrinsic_variance;
    std::vector<Vector> new_x_out_b = std::move(rb.extrinsic_mean);
    if (config.damping < 1.0 && have_prev) {
      new_v_out_b = config.damping * new_v_out_b + (1.0 - config.damping) * v_out_b;
      for (std::size_t i = 0; i < instances; ++i)
        new_x_out_b[i] = config.damping * new_x_out_b[i] + (1.0 - config.damping) * x_out_b[i];
    }
    v_out_b = new_v_out_b;
    x_out_b = std::move(new_x_out_b);

    row.v_in_b = v_in_b;
    row.v_out_b = v_out_b;
    row.alpha_b = rb.alpha;
    row.fisher_b = rb.fisher_estimate;
    row.calibration_b = rb.calibration;
    row.clip_events += rb.clip_events;

    if (!(std::isfinite(v_out_b) && v_out_b > 0.0) || !detail::all_finite(x_out_b)) {
      result.trace.failure = "non-finite message after module B at iteration " + std::to_string(t);
      result.trace.rows.push_back(row);
      return result;
    }

    result.estimates = rb.posterior_mean;
    if (config.record_mse && have_truth) row.mse = batch_mse(result.estimates, batch.truth);
    result.trace.rows.push_back(row);

    if (have_prev) {
      const double da = std::abs(v_out_a - prev_v_out_a) / prev_v_out_a;
      const double db = std::abs(v_out_b - prev_v_out_b) / prev_v_out_b;
      if (da < config.stop_tolerance && db < config.stop_tolerance) {
        result.trace.converged = true;
        return result;
      }
    }
    prev_v_out_a = v_out_a;
    prev_v_out_b = v_out_b;
    have_prev = true;
  }
  return result;
}

}  // namespace scvamp
