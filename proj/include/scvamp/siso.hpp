#pragma once

#include "scvamp/parallel.hpp"
#include "scvamp/score_models.hpp"
#include "scvamp/types.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace scvamp {

/// Extrinsic mean/variance message exchanged between modules.
struct SisoMessage {
  Vector mean;
  double variance = 1.0;
};

struct AlphaClip {
  double lo = 1e-6;
  double hi = 1.0 - 1e-6;
};

/// How the Fisher information entering the Onsager coefficient is obtained.
/// kAuto uses a model's closed form when one exists and Stein calibration is
/// off, and the mini-batch score-norm average otherwise. kExact with
/// calibration applies the c^2 rescaling to the closed form, keeping the
/// Fisher estimate consistent with the calibrated score used in Tweedie.
enum class FisherMode { kAuto, kMinibatch, kExact };

struct SisoConfig {
  AlphaClip alpha_clip{};
  bool stein_calibration = false;
  int batch_size = 1;  // documented batch size; the actual batch is whatever is passed in
  double v_floor = 1e-8;
  FisherMode fisher_mode = FisherMode::kAuto;
};

struct SisoResult {
  SisoMessage extrinsic;
  Vector posterior_mean;
  double posterior_variance = 0.0;
  double alpha = 0.0;
  double fisher_estimate = 0.0;  // E||s||^2 for the whole N-vector
  double calibration = 1.0;
};

struct SisoBatchResult {
  std::vector<Vector> extrinsic_mean;
  double extrinsic_variance = 0.0;
  std::vector<Vector> posterior_mean;
  double posterior_variance = 0.0;
  double alpha = 0.0;
  double fisher_estimate = 0.0;
  double calibration = 1.0;
  int clip_events = 0;
  bool fisher_exact = false;
};

/// Posterior mean via Tweedie's formula: x_in + v_in * score.
inline Vector tweedie_posterior_mean(const Eigen::Ref<const Vector>& x_in, double v_in,
                                     const Eigen::Ref<const Vector>& score) {
  if (!(v_in > 0.0)) throw std::invalid_argument("tweedie_posterior_mean: v_in must be > 0");
  if (x_in.size() != score.size())
    throw std::invalid_argument("tweedie_posterior_mean: dimension mismatch");
  return x_in + v_in * score;
}

/// Mini-batch Fisher estimate: (1/B) sum_i ||s_i||^2.
inline double estimate_fisher_minibatch(const std::vector<Vector>& scores, Index n) {
  if (scores.empty()) throw std::invalid_argument("estimate_fisher_minibatch: empty batch");
  std::vector<double> norms(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != n)
      throw std::invalid_argument("estimate_fisher_minibatch: dimension mismatch");
    norms[i] = scores[i].squaredNorm();
  }
  return pairwise_sum(norms) / static_cast<double>(scores.size());
}

/// Onsager coefficient alpha = clamp(1 - (v/N) J, lo, hi).
inline double onsager_coefficient(double v_in, double fisher, Index n, const AlphaClip& clip,
                                  bool* clipped = nullptr) {
  if (!(v_in > 0.0)) throw std::invalid_argument("onsager_coefficient: v_in must be > 0");
  if (!(fisher >= 0.0) || !std::isfinite(fisher))
    throw std::invalid_argument("onsager_coefficient: fisher must be >= 0 and finite");
  const double raw = 1.0 - v_in / static_cast<double>(n) * fisher;
  const double alpha = std::clamp(raw, clip.lo, clip.hi);
  if (clipped != nullptr) *clipped = alpha != raw;
  return alpha;
}

/// Scalar Stein rescale: c = -N / ((1/B) sum_i r_i^T s_i). After rescaling,
/// (1/B) sum_i r_i^T (c s_i) = -N on this batch. A denominator below
/// 1e-12 * N falls back to c = 1 (flagged through `degenerate`).
inline double stein_calibration(const std::vector<Vector>& inputs,
                                const std::vector<Vector>& scores, Index n,
                                bool* degenerate = nullptr) {
  if (inputs.empty() || inputs.size() != scores.size())
    throw std::invalid_argument("stein_calibration: batch lists must match and be non-empty");
  std::vector<double> moments(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != n || scores[i].size() != n)
      throw std::invalid_argument("stein_calibration: dimension mismatch");
    moments[i] = inputs[i].dot(scores[i]);
  }
  const double denom = pairwise_sum(moments) / static_cast<double>(inputs.size());
  if (degenerate != nullptr) *degenerate = false;
  if (std::abs(denom) < 1e-12 * static_cast<double>(n)) {
    if (degenerate != nullptr) *degenerate = true;
    return 1.0;
  }
  return -static_cast<double>(n) / denom;
}

/// Extrinsic message by precision subtraction:
/// mean = (x_post - alpha x_in) / (1 - alpha), variance = v_in alpha / (1 - alpha).
inline SisoMessage extrinsic_message(const Eigen::Ref<const Vector>& x_in, double v_in,
                                     const Eigen::Ref<const Vector>& x_post, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("extrinsic_message: alpha must lie in (0, 1); clip it first");
  if (x_in.size() != x_post.size())
    throw std::invalid_argument("extrinsic_message: dimension mismatch");
  SisoMessage out;
  out.mean = (x_post - alpha * x_in) / (1.0 - alpha);
  out.variance = v_in * alpha / (1.0 - alpha);
  return out;
}

/// Full score-based SISO evaluation over a mini-batch sharing one input
/// variance. Scores are evaluated per instance (optionally in parallel; the
/// reductions are fixed-order so the thread count never changes the result),
/// Stein-calibrated when enabled, reduced to a shared Fisher estimate and a
/// shared Onsager coefficient, and turned into per-instance posterior means
/// and extrinsic messages.
inline SisoBatchResult siso_forward_batch(const ScoreModel& model,
                                          const std::vector<Vector>& x_in, double v_in,
                                          const std::vector<Vector>& observations,
                                          const SisoConfig& config, int threads = 1) {
  if (x_in.empty()) throw std::invalid_argument("siso_forward_batch: empty batch");
  if (!observations.empty() && observations.size() != x_in.size())
    throw std::invalid_argument("siso_forward_batch: observation count mismatch");
  if (!(v_in > 0.0) || !std::isfinite(v_in))
    throw std::invalid_argument("siso_forward_batch: input variance must be positive and finite");
  const Index n = x_in.front().size();
  const auto batch = static_cast<Index>(x_in.size());

  std::vector<Vector> scores(x_in.size());
  parallel_for(batch, threads, [&](Index i) {
    const Vector* y = observations.empty() ? nullptr : &observations[static_cast<std::size_t>(i)];
    scores[static_cast<std::size_t>(i)] = model.score(x_in[static_cast<std::size_t>(i)], v_in, y);
  });

  SisoBatchResult out;
  out.calibration = 1.0;
  if (config.stein_calibration) {
    out.calibration = stein_calibration(x_in, scores, n);
    if (out.calibration != 1.0)
      for (auto& s : scores) s *= out.calibration;
  }

  bool use_exact = false;
  switch (config.fisher_mode) {
    case FisherMode::kAuto:
      use_exact = static_cast<bool>(model.exact_fisher) && !config.stein_calibration;
      break;
    case FisherMode::kExact:
      if (!model.exact_fisher)
        throw std::invalid_argument("siso_forward_batch: model has no closed-form Fisher");
      use_exact = true;
      break;
    case FisherMode::kMinibatch:
      use_exact = false;
      break;
  }
  out.fisher_exact = use_exact;
  out.fisher_estimate =
      use_exact ? out.calibration * out.calibration * model.exact_fisher(v_in) *
                      static_cast<double>(n)
                : estimate_fisher_minibatch(scores, n);

  bool clipped = false;
  out.alpha = onsager_coefficient(v_in, out.fisher_estimate, n, config.alpha_clip, &clipped);
  out.clip_events = clipped ? 1 : 0;
  out.posterior_variance = v_in * out.alpha;

  out.posterior_mean.resize(x_in.size());
  out.extrinsic_mean.resize(x_in.size());
  out.extrinsic_variance = v_in * out.alpha / (1.0 - out.alpha);
  parallel_for(batch, threads, [&](Index idx) {
    const auto i = static_cast<std::size_t>(idx);
    out.posterior_mean[i] = tweedie_posterior_mean(x_in[i], v_in, scores[i]);
    out.extrinsic_mean[i] = (out.posterior_mean[i] - out.alpha * x_in[i]) / (1.0 - out.alpha);
  });
  return out;
}

/// Single-message wrapper: the batch context is the instance itself, so the
/// Fisher estimate self-averages over the N coordinates of one score vector.
inline SisoResult siso_forward(const ScoreModel& model, const SisoMessage& input,
                               const std::optional<Vector>& y, const SisoConfig& config) {
  std::vector<Vector> means{input.mean};
  std::vector<Vector> obs;
  if (y.has_value()) obs.push_back(*y);
  SisoBatchResult batch = siso_forward_batch(model, means, input.variance, obs, config);
  SisoResult out;
  out.extrinsic = SisoMessage{batch.extrinsic_mean.front(), batch.extrinsic_variance};
  out.posterior_mean = batch.posterior_mean.front();
  out.posterior_variance = batch.posterior_variance;
  out.alpha = batch.alpha;
  out.fisher_estimate = batch.fisher_estimate;
  out.calibration = batch.calibration;
  return out;
}

}  // namespace scvamp
