#pragma once

#include "scvamp/parallel.hpp"
#include "scvamp/random_matrix.hpp"
#include "scvamp/rng.hpp"
#include "scvamp/siso.hpp"
#include "scvamp/types.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scvamp {

/// Known differentiable observation map y = f(x) + n. `vjp(x, u)` returns
/// J_f(x)^T u without forming the Jacobian.
struct ForwardModel {
  std::string name;
  Index input_dim = 0;
  Index output_dim = 0;
  double noise_variance = 1.0;  // sigma_n^2
  std::function<Vector(const Vector&)> f;
  std::function<Vector(const Vector&, const Vector&)> vjp;
};

inline ForwardModel make_linear_forward(SensingMatrix a, double noise_variance) {
  auto shared = std::make_shared<SensingMatrix>(std::move(a));
  ForwardModel m;
  m.name = "linear";
  m.input_dim = shared->cols();
  m.output_dim = shared->rows();
  m.noise_variance = noise_variance;
  m.f = [shared](const Vector& x) { return shared->apply(x); };
  m.vjp = [shared](const Vector&, const Vector& u) { return shared->apply_transpose(u); };
  return m;
}

inline ForwardModel make_tanh_forward(Index n, double noise_variance) {
  ForwardModel m;
  m.name = "tanh";
  m.input_dim = n;
  m.output_dim = n;
  m.noise_variance = noise_variance;
  m.f = [](const Vector& x) { return x.array().tanh().matrix().eval(); };
  m.vjp = [](const Vector& x, const Vector& u) {
    return ((1.0 - x.array().tanh().square()) * u.array()).matrix().eval();
  };
  return m;
}

inline ForwardModel make_clip_forward(Index n, double limit, double noise_variance) {
  ForwardModel m;
  m.name = "clip";
  m.input_dim = n;
  m.output_dim = n;
  m.noise_variance = noise_variance;
  m.f = [limit](const Vector& x) {
    return x.array().min(limit).max(-limit).matrix().eval();
  };
  m.vjp = [limit](const Vector& x, const Vector& u) {
    Vector out(x.size());
    for (Index i = 0; i < x.size(); ++i) out[i] = std::abs(x[i]) < limit ? u[i] : 0.0;
    return out;
  };
  return m;
}

/// grad_x log p(y|x) = J_f(x)^T (y - f(x)) / sigma_n^2.
inline Vector grad_log_likelihood(const ForwardModel& model, const Eigen::Ref<const Vector>& x,
                                  const Eigen::Ref<const Vector>& y) {
  if (x.size() != model.input_dim || y.size() != model.output_dim)
    throw std::invalid_argument("grad_log_likelihood: dimension mismatch");
  return model.vjp(x, y - model.f(x)) / model.noise_variance;
}

/// One unadjusted Langevin step against the tilted posterior
/// p(x | x_in, y) prop. to p(y|x) N(x; x_in, v_in I).
inline Vector ula_step(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& x_in,
                       double v_in, const ForwardModel& model, const Eigen::Ref<const Vector>& y,
                       double step, RngStream& rng) {
  if (step < 0.0) throw std::invalid_argument("ula_step: step must be >= 0");
  Vector noise(x.size());
  for (Index i = 0; i < x.size(); ++i) noise[i] = rng.gaussian();
  const Vector drift = grad_log_likelihood(model, x, y) - (x - x_in) / v_in;
  Vector next = x + step * drift + std::sqrt(2.0 * step) * noise;
  if (!next.allFinite()) throw std::runtime_error("ula_step: non-finite state");
  return next;
}

struct LangevinConfig {
  double step_size = -1.0;  // < 0: auto, 0.05 * min(v_in, sigma_n^2)
  int steps = 500;
  int burn_in = 200;
  int particles = 32;
  bool warm_start = true;
  std::string step_decay = "constant";  // or "rsqrt" for delta / sqrt(k+1)
};

struct LangevinEstimate {
  Vector posterior_mean;
  double sample_variance = 0.0;  // per-symbol spread of the retained samples
  Matrix final_states;           // N x particles; feed back in as warm starts
};

/// Posterior mean by averaging `particles` independent ULA chains after
/// burn-in. Chains draw from split sub-streams and may run concurrently; the
/// cross-chain reduction is fixed-order, so the thread count does not change
/// the estimate. Warm starts come from `warm_states` columns when provided,
/// otherwise every chain starts at x_in.
inline LangevinEstimate posterior_mean_langevin(const Eigen::Ref<const Vector>& x_in, double v_in,
                                                const Eigen::Ref<const Vector>& y,
                                                const ForwardModel& model,
                                                const LangevinConfig& config, RngStream& rng,
                                                const Matrix* warm_states = nullptr,
                                                int threads = 1) {
  if (config.burn_in >= config.steps)
    throw std::invalid_argument("posterior_mean_langevin: burn_in must be < steps");
  if (config.particles < 1)
    throw std::invalid_argument("posterior_mean_langevin: need at least one particle");
  const double base_step =
      config.step_size > 0.0 ? config.step_size : 0.05 * std::min(v_in, model.noise_variance);
  if (!(base_step > 0.0))
    throw std::invalid_argument("posterior_mean_langevin: step size must be > 0");
  const bool decay = config.step_decay == "rsqrt";
  const Index n = x_in.size();

  std::vector<Vector> chain_sum(config.particles, Vector::Zero(n));
  std::vector<Vector> chain_sumsq(config.particles, Vector::Zero(n));
  Matrix finals(n, config.particles);
  std::vector<std::string> errors(config.particles);

  parallel_for(config.particles, threads, [&](Index chain) {
    RngStream local = rng.split("chain/" + std::to_string(chain));
    Vector x = (warm_states != nullptr && config.warm_start && warm_states->cols() > chain)
                   ? warm_states->col(chain).eval()
                   : Vector(x_in);
    try {
      for (int k = 0; k < config.steps; ++k) {
        const double step =
            decay ? base_step / std::sqrt(static_cast<double>(k) + 1.0) : base_step;
        x = ula_step(x, x_in, v_in, model, y, step, local);
        if (k >= config.burn_in) {
          chain_sum[chain] += x;
          chain_sumsq[chain] += x.cwiseAbs2();
        }
      }
    } catch (const std::exception& e) {
      errors[chain] = "chain " + std::to_string(chain) + ": " + e.what();
    }
    finals.col(chain) = x;
  });
  for (const auto& err : errors)
    if (!err.empty()) throw std::runtime_error("posterior_mean_langevin: " + err);

  // Fixed-order pairwise combine across chains.
  const auto combine = [&](const std::vector<Vector>& parts) {
    std::vector<Vector> level = parts;
    while (level.size() > 1) {
      std::vector<Vector> next;
      for (std::size_t i = 0; i + 1 < level.size(); i += 2) next.push_back(level[i] + level[i + 1]);
      if (level.size() % 2 == 1) next.push_back(level.back());
      level = std::move(next);
    }
    return level.front();
  };
  const double retained =
      static_cast<double>(config.steps - config.burn_in) * static_cast<double>(config.particles);
  LangevinEstimate out;
  out.posterior_mean = combine(chain_sum) / retained;
  const Vector second_moment = combine(chain_sumsq) / retained;
  out.sample_variance =
      (second_moment - out.posterior_mean.cwiseAbs2()).sum() / static_cast<double>(n);
  out.final_states = std::move(finals);
  return out;
}

struct HybridResult {
  SisoResult result;
  Matrix final_states;  // pass back as warm starts for the next iteration
};

/// Appendix-style hybrid module A: Langevin posterior mean, implicit
/// conditional score (x_post - x_in)/v_in, score-norm Fisher estimate, then
/// the standard Onsager/extrinsic pipeline, so the sampled module satisfies
/// the same SISO contract as the analytic ones.
inline HybridResult hybrid_module_a(const SisoMessage& input, const Eigen::Ref<const Vector>& y,
                                    const ForwardModel& model, const LangevinConfig& lang_config,
                                    const SisoConfig& siso_config, RngStream& rng,
                                    const Matrix* warm_states = nullptr, int threads = 1) {
  LangevinEstimate sampled = posterior_mean_langevin(input.mean, input.variance, y, model,
                                                     lang_config, rng, warm_states, threads);
  const Index n = input.mean.size();
  const Vector score = (sampled.posterior_mean - input.mean) / input.variance;

  HybridResult out;
  out.final_states = std::move(sampled.final_states);
  SisoResult& r = out.result;
  r.calibration = 1.0;
  r.fisher_estimate = score.squaredNorm();  // single-instance batch: self-averages over N
  bool clipped = false;
  r.alpha = onsager_coefficient(input.variance, r.fisher_estimate, n, siso_config.alpha_clip,
                                &clipped);
  r.posterior_mean = sampled.posterior_mean;
  r.posterior_variance = input.variance * r.alpha;
  r.extrinsic = extrinsic_message(input.mean, input.variance, r.posterior_mean, r.alpha);
  return out;
}

}  // namespace scvamp
