#pragma once

#include "scvamp/random_matrix.hpp"
#include "scvamp/rng.hpp"
#include "scvamp/types.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

namespace scvamp {

struct GaussianPriorParams {
  double power = 1.0;  // prior variance P > 0
};

struct BernoulliGaussianParams {
  double sparsity = 0.1;         // rho in [0, 1]
  double active_variance = 1.0;  // sigma_x^2 > 0
};

struct PairwiseGaussianParams {
  double variance = 1.0;     // marginal sigma^2
  double correlation = 0.9;  // xi in (-1, 1)
};

struct LinearLikelihoodParams {
  SensingMatrix matrix;
  double noise_variance = 1.0;  // sigma_w^2 > 0
};

namespace detail {
inline void require_positive_variance(double v_in) {
  if (!(v_in > 0.0)) throw std::invalid_argument("score model: input variance must be > 0");
}
}  // namespace detail

/// Score of the Gaussian-smoothed N(0, P) prior: -x / (P + v_in).
inline Vector score_gaussian_prior(const Eigen::Ref<const Vector>& x_in, double v_in,
                                   const GaussianPriorParams& p) {
  detail::require_positive_variance(v_in);
  if (!(p.power > 0.0)) throw std::invalid_argument("score_gaussian_prior: power must be > 0");
  return -x_in / (p.power + v_in);
}

/// Scalar score of the smoothed Bernoulli-Gaussian marginal
/// (1-rho) N(0, v) + rho N(0, sigma_x^2 + v), evaluated in the log domain so
/// large |x| does not underflow the mixture weights.
inline double score_bg_scalar(double x, double v_in, const BernoulliGaussianParams& p) {
  const double v0 = v_in;
  const double v1 = p.active_variance + v_in;
  if (p.sparsity <= 0.0) return -x / v0;
  if (p.sparsity >= 1.0) return -x / v1;
  const double l0 = std::log1p(-p.sparsity) - 0.5 * std::log(v0) - x * x / (2.0 * v0);
  const double l1 = std::log(p.sparsity) - 0.5 * std::log(v1) - x * x / (2.0 * v1);
  const double top = std::max(l0, l1);
  const double w0 = std::exp(l0 - top);
  const double w1 = std::exp(l1 - top);
  return (w0 * (-x / v0) + w1 * (-x / v1)) / (w0 + w1);
}

inline Vector score_bg_prior(const Eigen::Ref<const Vector>& x_in, double v_in,
                             const BernoulliGaussianParams& p) {
  detail::require_positive_variance(v_in);
  if (!(p.sparsity >= 0.0 && p.sparsity <= 1.0))
    throw std::invalid_argument("score_bg_prior: sparsity must lie in [0, 1]");
  if (!(p.active_variance > 0.0))
    throw std::invalid_argument("score_bg_prior: active variance must be > 0");
  Vector s(x_in.size());
  for (Index i = 0; i < x_in.size(); ++i) s[i] = score_bg_scalar(x_in[i], v_in, p);
  return s;
}

/// Per-pair score of the smoothed correlated-pair prior:
/// s = -(Sigma + v I_2)^{-1} r with Sigma = [[s2, xi s2], [xi s2, s2]].
inline Vector score_pairwise_gaussian(const Eigen::Ref<const Vector>& x_in, double v_in,
                                      const PairwiseGaussianParams& p) {
  detail::require_positive_variance(v_in);
  if (!(std::abs(p.correlation) < 1.0))
    throw std::invalid_argument("score_pairwise_gaussian: |correlation| must be < 1");
  if (x_in.size() % 2 != 0)
    throw std::invalid_argument("score_pairwise_gaussian: dimension must be even");
  const double a = p.variance + v_in;
  const double b = p.correlation * p.variance;
  const double det = a * a - b * b;
  Vector s(x_in.size());
  for (Index k = 0; k < x_in.size(); k += 2) {
    const double r1 = x_in[k];
    const double r2 = x_in[k + 1];
    s[k] = -(a * r1 - b * r2) / det;
    s[k + 1] = -(a * r2 - b * r1) / det;
  }
  return s;
}

struct LmmseResult {
  Vector estimate;
  double trace_cov = 0.0;  // Tr(Sigma_post)
};

/// Wiener-filter estimate
///   xhat = (v^{-1} I + sw^{-2} A^T A)^{-1} (v^{-1} x_in + sw^{-2} A^T y)
/// solved in the SVD basis: after rotating by V^T the system is diagonal, so
/// the N x N solve costs two rotations instead of a dense inverse.
inline LmmseResult lmmse_estimate(const Eigen::Ref<const Vector>& x_in, double v_in,
                                  const Eigen::Ref<const Vector>& y,
                                  const LinearLikelihoodParams& p) {
  detail::require_positive_variance(v_in);
  if (!(p.noise_variance > 0.0))
    throw std::invalid_argument("lmmse_estimate: noise variance must be > 0");
  const SensingMatrix& a = p.matrix;
  if (x_in.size() != a.cols() || y.size() != a.rows())
    throw std::invalid_argument("lmmse_estimate: dimension mismatch");
  const Index n = a.cols();
  const Index k = a.singular_values().size();
  const Vector t = a.right_basis().transpose() * x_in;
  const Vector u = a.left_basis().transpose() * y;
  Vector solved(n);
  double trace = 0.0;
  for (Index i = 0; i < k; ++i) {
    const double d = a.singular_values()[i];
    const double precision = 1.0 / v_in + d * d / p.noise_variance;
    solved[i] = (t[i] / v_in + d * u[i] / p.noise_variance) / precision;
    trace += 1.0 / precision;
  }
  for (Index i = k; i < n; ++i) solved[i] = t[i];  // null space: message passes through
  trace += static_cast<double>(n - k) * v_in;
  return {a.right_basis() * solved, trace};
}

/// Conditional score recovered from the Wiener filter: s = (xhat - x_in) / v.
inline Vector conditional_score_linear(const Eigen::Ref<const Vector>& x_in, double v_in,
                                       const Eigen::Ref<const Vector>& y,
                                       const LinearLikelihoodParams& p) {
  return (lmmse_estimate(x_in, v_in, y, p).estimate - x_in) / v_in;
}

/// Implicit score of a black-box denoiser eta: s = (eta(x_in) - x_in) / v.
/// Variances below `v_floor` are clamped (flagged through `clamped`) rather
/// than rejected; the 1/v amplification is otherwise unbounded.
inline Vector implicit_score_from_denoiser(const std::function<Vector(const Vector&)>& denoiser,
                                           const Eigen::Ref<const Vector>& x_in, double v_in,
                                           double v_floor = 1e-8, bool* clamped = nullptr) {
  const bool clip = v_in < v_floor;
  if (clamped != nullptr) *clamped = clip;
  const double v = clip ? v_floor : v_in;
  const Vector denoised = denoiser(x_in);
  if (denoised.size() != x_in.size())
    throw std::invalid_argument("implicit_score_from_denoiser: denoiser changed dimension");
  return (denoised - x_in) / v;
}

/// Type-erased score evaluator. `score(x_in, v_in, y)` ignores `y` for prior
/// (denoiser-side) models. `exact_fisher`, when set, returns the closed-form
/// per-symbol Fisher information E||s||^2 / N at input variance v;
/// `sample_prior` draws one signal vector and backs the Monte Carlo MMSE path
/// in state evolution.
struct ScoreModel {
  std::string kind;
  std::function<Vector(const Vector& x_in, double v_in, const Vector* y)> score;
  std::function<double(double v_in)> exact_fisher;
  std::function<Vector(RngStream& rng, Index n)> sample_prior;
  std::shared_ptr<long> v_floor_clamps;  // implicit-denoiser models count clamp events here
};

inline ScoreModel make_gaussian_prior_model(const GaussianPriorParams& p) {
  ScoreModel m;
  m.kind = "gaussian";
  m.score = [p](const Vector& x, double v, const Vector*) { return score_gaussian_prior(x, v, p); };
  m.exact_fisher = [p](double v) { return 1.0 / (p.power + v); };
  m.sample_prior = [p](RngStream& rng, Index n) {
    return sample_gaussian_vector(rng, n, 0.0, p.power);
  };
  return m;
}

inline ScoreModel make_bg_prior_model(const BernoulliGaussianParams& p) {
  ScoreModel m;
  m.kind = "bernoulli-gaussian";
  m.score = [p](const Vector& x, double v, const Vector*) { return score_bg_prior(x, v, p); };
  m.sample_prior = [p](RngStream& rng, Index n) {
    Vector x(n);
    const double sd = std::sqrt(p.active_variance);
    for (Index i = 0; i < n; ++i) {
      // Draw both variates unconditionally so the stream layout does not
      // depend on the sparsity pattern.
      const double u = rng.uniform01();
      const double g = rng.gaussian();
      x[i] = u < p.sparsity ? sd * g : 0.0;
    }
    return x;
  };
  return m;
}

inline ScoreModel make_pairwise_gaussian_model(const PairwiseGaussianParams& p) {
  ScoreModel m;
  m.kind = "pairwise-gaussian";
  m.score = [p](const Vector& x, double v, const Vector*) {
    return score_pairwise_gaussian(x, v, p);
  };
  m.exact_fisher = [p](double v) {
    // Tr((Sigma + v I_2)^{-1}) / 2 per coordinate.
    const double a = p.variance + v;
    const double b = p.correlation * p.variance;
    return a / (a * a - b * b);
  };
  m.sample_prior = [p](RngStream& rng, Index n) {
    if (n % 2 != 0) throw std::invalid_argument("pairwise prior: dimension must be even");
    Vector x(n);
    const double sd = std::sqrt(p.variance);
    const double cross = p.correlation;
    const double ortho = std::sqrt(1.0 - cross * cross);
    for (Index k = 0; k < n; k += 2) {
      const double g1 = rng.gaussian();
      const double g2 = rng.gaussian();
      x[k] = sd * g1;
      x[k + 1] = sd * (cross * g1 + ortho * g2);
    }
    return x;
  };
  return m;
}

inline ScoreModel make_linear_lmmse_model(LinearLikelihoodParams params) {
  auto shared = std::make_shared<LinearLikelihoodParams>(std::move(params));
  ScoreModel m;
  m.kind = "linear-lmmse";
  m.score = [shared](const Vector& x, double v, const Vector* y) {
    if (y == nullptr) throw std::invalid_argument("linear-lmmse model requires an observation");
    return conditional_score_linear(x, v, *y, *shared);
  };
  m.exact_fisher = [shared](double v) {
    // E||s||^2 / N = (1/N) sum_i d_i^2 / (sigma_w^2 + v d_i^2); null-space
    // directions contribute zero.
    const Vector& d = shared->matrix.singular_values();
    double acc = 0.0;
    for (Index i = 0; i < d.size(); ++i)
      acc += d[i] * d[i] / (shared->noise_variance + v * d[i] * d[i]);
    return acc / static_cast<double>(shared->matrix.cols());
  };
  return m;
}

inline ScoreModel make_implicit_denoiser_model(
    std::function<Vector(const Vector& x_in, double v_in)> denoiser, double v_floor = 1e-8) {
  ScoreModel m;
  m.kind = "implicit-denoiser";
  m.v_floor_clamps = std::make_shared<long>(0);
  auto counter = m.v_floor_clamps;
  m.score = [denoiser = std::move(denoiser), v_floor, counter](const Vector& x, double v,
                                                               const Vector*) {
    bool clamped = false;
    auto bound = [&](const Vector& in) { return denoiser(in, std::max(v, v_floor)); };
    Vector s = implicit_score_from_denoiser(bound, x, v, v_floor, &clamped);
    if (clamped) ++(*counter);
    return s;
  };
  return m;
}

}  // namespace scvamp
