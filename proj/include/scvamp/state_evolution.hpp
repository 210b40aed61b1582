#pragma once

#include "scvamp/rng.hpp"
#include "scvamp/score_models.hpp"
#include "scvamp/siso.hpp"
#include "scvamp/types.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scvamp {

/// Per-symbol MMSE v_in -> mmse(v_in) of one module's effective scalar
/// channel. Sound evaluators satisfy 0 <= mmse(v) <= v.
struct MmseFunction {
  std::function<double(double v_in)> eval;
  std::string kind;  // "closed-form" | "quadrature" | "monte-carlo"
};

struct SeStepResult {
  double alpha = 0.0;
  double v_post = 0.0;
  double v_out = 0.0;
};

/// One SE half-step: alpha = clamp(mmse(v)/v), v_post = v alpha,
/// v_out = v alpha / (1 - alpha).
inline SeStepResult se_step(double v_in, const MmseFunction& mmse, const AlphaClip& clip = {}) {
  if (!(v_in > 0.0)) throw std::invalid_argument("se_step: v_in must be > 0");
  const double raw = mmse.eval(v_in) / v_in;
  SeStepResult out;
  out.alpha = std::clamp(raw, clip.lo, clip.hi);
  out.v_post = v_in * out.alpha;
  out.v_out = v_in * out.alpha / (1.0 - out.alpha);
  return out;
}

struct SeTraceRow {
  int iter = 0;
  double v_in_a = 0.0, v_out_a = 0.0, v_in_b = 0.0, v_out_b = 0.0;
  double alpha_a = 0.0, alpha_b = 0.0;
  double predicted_mse = 0.0;  // v_in_B * alpha_B
};

struct SeTrace {
  std::vector<SeTraceRow> rows;
  bool converged = false;
};

struct SeConfig {
  int max_iterations = 20;
  double v_init = 1.0;
  double stop_tolerance = 1e-8;
  AlphaClip clip{};
};

/// Scalar SE recursion mirroring run_scvamp's schedule and stop rule. Row 0
/// is the initialization state (all variances at v_init, no denoising yet);
/// row t >= 1 is the t-th A -> B round.
inline SeTrace run_se(const SeConfig& config, const MmseFunction& mmse_a,
                      const MmseFunction& mmse_b) {
  if (!(config.v_init > 0.0)) throw std::invalid_argument("run_se: v_init must be > 0");
  SeTrace trace;
  SeTraceRow init;
  init.iter = 0;
  init.v_in_a = init.v_out_a = init.v_in_b = init.v_out_b = config.v_init;
  init.alpha_a = init.alpha_b = 1.0;
  init.predicted_mse = config.v_init;
  trace.rows.push_back(init);
  double v_out_b = config.v_init;
  bool have_prev = false;
  double prev_a = 0.0, prev_b = 0.0;
  for (int t = 1; t <= config.max_iterations; ++t) {
    SeTraceRow row;
    row.iter = t;
    row.v_in_a = v_out_b;
    const SeStepResult a = se_step(row.v_in_a, mmse_a, config.clip);
    row.v_out_a = a.v_out;
    row.alpha_a = a.alpha;
    row.v_in_b = a.v_out;
    const SeStepResult b = se_step(row.v_in_b, mmse_b, config.clip);
    row.v_out_b = b.v_out;
    row.alpha_b = b.alpha;
    row.predicted_mse = b.v_post;
    trace.rows.push_back(row);
    v_out_b = b.v_out;
    if (have_prev) {
      const double da = std::abs(row.v_out_a - prev_a) / prev_a;
      const double db = std::abs(row.v_out_b - prev_b) / prev_b;
      if (da < config.stop_tolerance && db < config.stop_tolerance) {
        trace.converged = true;
        break;
      }
    }
    prev_a = row.v_out_a;
    prev_b = row.v_out_b;
    have_prev = true;
  }
  return trace;
}

inline MmseFunction make_gaussian_prior_mmse(double power) {
  return {[power](double v) { return v * power / (v + power); }, "closed-form"};
}

inline MmseFunction make_gaussian_likelihood_mmse(double noise_variance) {
  return {[noise_variance](double v) { return v * noise_variance / (v + noise_variance); },
          "closed-form"};
}

/// Per-symbol MMSE of the linear module from the SVD spectrum:
/// (1/N) [ sum_i 1/(1/v + d_i^2/sw^2) + (N - min(M,N))^+ v ].
inline MmseFunction make_linear_mmse(Vector singular_values, double noise_variance,
                                     Index signal_dim) {
  return {[d = std::move(singular_values), noise_variance, signal_dim](double v) {
            double acc = 0.0;
            for (Index i = 0; i < d.size(); ++i)
              acc += 1.0 / (1.0 / v + d[i] * d[i] / noise_variance);
            acc += static_cast<double>(signal_dim - d.size()) * v;
            return acc / static_cast<double>(signal_dim);
          },
          "closed-form"};
}

/// Per-symbol MMSE of the correlated-pair prior: (1/2) Tr((Sigma^-1 + I/v)^-1).
inline MmseFunction make_pairwise_mmse(const PairwiseGaussianParams& p) {
  const double lam1 = p.variance * (1.0 + p.correlation);
  const double lam2 = p.variance * (1.0 - p.correlation);
  return {[lam1, lam2](double v) {
            return 0.5 * (lam1 * v / (lam1 + v) + lam2 * v / (lam2 + v));
          },
          "closed-form"};
}

struct GaussHermite {
  Vector nodes;
  Vector weights;
};

/// Gauss-Hermite rule for weight exp(-t^2), via Golub-Welsch on the symmetric
/// Jacobi matrix.
inline GaussHermite gauss_hermite(int n) {
  if (n < 1) throw std::invalid_argument("gauss_hermite: need at least one node");
  Matrix jacobi = Matrix::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double off = std::sqrt(static_cast<double>(i) / 2.0);
    jacobi(i, i - 1) = off;
    jacobi(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(jacobi);
  GaussHermite rule;
  rule.nodes = es.eigenvalues();
  rule.weights.resize(n);
  const double sqrt_pi = std::sqrt(M_PI);
  for (int i = 0; i < n; ++i) {
    const double first = es.eigenvectors()(0, i);
    rule.weights[i] = sqrt_pi * first * first;
  }
  return rule;
}

/// E_{U ~ N(0, s2)}[g(U)] by Gauss-Hermite.
template <class Fn>
double gaussian_expectation(const GaussHermite& rule, double s2, Fn&& g) {
  const double scale = std::sqrt(2.0 * s2);
  double acc = 0.0;
  for (Index i = 0; i < rule.nodes.size(); ++i)
    acc += rule.weights[i] * g(scale * rule.nodes[i]);
  return acc / std::sqrt(M_PI);
}

struct GaussLegendre {
  Vector nodes;    // on (-1, 1)
  Vector weights;  // sum to 2
};

/// Gauss-Legendre rule via Golub-Welsch on the Legendre Jacobi matrix.
inline GaussLegendre gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: need at least one node");
  Matrix jacobi = Matrix::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double b = static_cast<double>(i) /
                     std::sqrt(4.0 * static_cast<double>(i) * static_cast<double>(i) - 1.0);
    jacobi(i, i - 1) = b;
    jacobi(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(jacobi);
  GaussLegendre rule;
  rule.nodes = es.eigenvalues();
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    const double first = es.eigenvectors()(0, i);
    rule.weights[i] = 2.0 * first * first;
  }
  return rule;
}

/// Per-symbol MMSE of the scalar Bernoulli-Gaussian channel X_in = X + Z,
/// computed as rho sx^2 - E[mu(U)^2] with the posterior mean mu obtained from
/// the mixture score via Tweedie. The observation integral is done with a
/// composite Gauss-Legendre scheme whose panels follow the two scales of the
/// integrand: the spike/slab transition lives at width ~ sqrt(v) around
/// |u| = tau while the slab tail decays on the sqrt(sx^2 + v) scale, so a
/// single fixed-scale rule (e.g. Gauss-Hermite on the slab scale) cannot
/// resolve the transition once v << sx^2. `budget` is the panel count per
/// region (two regions, 16-point rule per panel).
inline double mmse_bg(double v, const BernoulliGaussianParams& p, int budget = 129) {
  if (!(v > 0.0)) throw std::invalid_argument("mmse_bg: v must be > 0");
  if (p.sparsity <= 0.0) return 0.0;
  if (p.sparsity >= 1.0) return v * p.active_variance / (v + p.active_variance);
  const double v0 = v;
  const double v1 = p.active_variance + v;
  static thread_local std::pair<int, GaussLegendre> cached{0, {}};
  if (cached.first != 16) cached = {16, gauss_legendre(16)};
  const GaussLegendre& rule = cached.second;

  auto integrand = [&](double u) {
    const double mu = u + v * score_bg_scalar(u, v, p);
    const double l0 = std::log1p(-p.sparsity) - 0.5 * std::log(2.0 * M_PI * v0) -
                      u * u / (2.0 * v0);
    const double l1 = std::log(p.sparsity) - 0.5 * std::log(2.0 * M_PI * v1) -
                      u * u / (2.0 * v1);
    const double top = std::max(l0, l1);
    const double density = std::exp(top) * (std::exp(l0 - top) + std::exp(l1 - top));
    return mu * mu * density;
  };
  auto integrate = [&](double lo, double hi, int panels) {
    double acc = 0.0;
    const double width = (hi - lo) / panels;
    for (int panel = 0; panel < panels; ++panel) {
      const double a = lo + panel * width;
      const double mid = a + 0.5 * width;
      for (Index q = 0; q < rule.nodes.size(); ++q)
        acc += rule.weights[q] * integrand(mid + 0.5 * width * rule.nodes[q]);
    }
    return acc * 0.5 * width;
  };

  // |u| = tau is where the two mixture branches have equal density.
  const double log_ratio =
      std::log1p(-p.sparsity) - std::log(p.sparsity) + 0.5 * std::log(v1 / v0);
  const double tau2 = std::max(0.0, 2.0 * log_ratio / (1.0 / v0 - 1.0 / v1));
  const double inner = std::sqrt(tau2) + 15.0 * std::sqrt(v0);
  const double outer = inner + 12.0 * std::sqrt(v1);
  const double second_moment =
      2.0 * (integrate(0.0, inner, budget) + integrate(inner, outer, budget));
  return p.sparsity * p.active_variance - second_moment;
}

inline MmseFunction make_bg_mmse(const BernoulliGaussianParams& p, int nodes = 129) {
  return {[p, nodes](double v) { return mmse_bg(v, p, nodes); }, "quadrature"};
}

/// Monte Carlo per-symbol MMSE of a score model's Tweedie denoiser: draw
/// x ~ prior, corrupt with N(0, v I), denoise with the (optionally
/// Stein-calibrated) score, and average the per-symbol squared error. This is
/// the SE-side MMSE for learned scores.
inline double mmse_from_score_model(const ScoreModel& model, double v, Index n, int batch,
                                    RngStream& rng, bool calibrate = false) {
  if (!model.sample_prior)
    throw std::invalid_argument("mmse_from_score_model: model has no prior sampler");
  if (batch < 1) throw std::invalid_argument("mmse_from_score_model: batch must be >= 1");
  std::vector<Vector> truth(static_cast<std::size_t>(batch));
  std::vector<Vector> noisy(static_cast<std::size_t>(batch));
  std::vector<Vector> scores(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    truth[b] = model.sample_prior(rng, n);
    noisy[b] = truth[b] + sample_gaussian_vector(rng, n, 0.0, v);
    scores[b] = model.score(noisy[b], v, nullptr);
  }
  double c = 1.0;
  if (calibrate) c = stein_calibration(noisy, scores, n);
  std::vector<double> sq(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const Vector post = noisy[b] + v * c * scores[b];
    sq[b] = (post - truth[b]).squaredNorm();
  }
  return pairwise_sum(sq) / (static_cast<double>(batch) * static_cast<double>(n));
}

inline MmseFunction make_score_model_mmse(const ScoreModel& model, Index n, int batch,
                                          std::uint64_t seed, bool calibrate = false) {
  return {[model, n, batch, seed, calibrate](double v) {
            // Fresh labelled sub-stream per evaluation point, so grid
            // evaluations are order-independent and deterministic.
            char label[48];
            std::snprintf(label, sizeof(label), "mmse/%.17g", v);
            RngStream root(seed);
            RngStream local = root.split(label);
            return mmse_from_score_model(model, v, n, batch, local, calibrate);
          },
          "monte-carlo"};
}

struct FixedPointReport {
  double v_star = 0.0;
  double mutual_information_nats = 0.0;
  int iterations_to_converge = 0;
};

/// Scalar Gaussian fixed point: the SE recursion lands on v* = sigma^2 and
/// the fixed-point mutual information (1/2) log(1 + P/sigma^2) equals the
/// channel's. v_star is taken from the recursion; the closed form is the
/// cross-check exercised by the tests.
inline FixedPointReport scalar_gaussian_fixed_point(double p, double sigma2) {
  if (!(p > 0.0) || !(sigma2 > 0.0))
    throw std::invalid_argument("scalar_gaussian_fixed_point: parameters must be > 0");
  SeConfig config;
  config.max_iterations = 64;
  config.v_init = p;
  config.stop_tolerance = 1e-14;
  const SeTrace trace =
      run_se(config, make_gaussian_likelihood_mmse(sigma2), make_gaussian_prior_mmse(p));
  FixedPointReport report;
  report.v_star = trace.rows.back().v_in_b;
  report.iterations_to_converge = trace.rows.back().iter;
  report.mutual_information_nats = 0.5 * std::log1p(p / sigma2);
  return report;
}

/// Remark-1 mutual information: (1/2) sum_i log(1 + lambda_i P / sigma^2).
inline double vector_gaussian_mi(const Vector& eigenvalues, double p, double sigma2) {
  if ((eigenvalues.array() < 0.0).any())
    throw std::invalid_argument("vector_gaussian_mi: eigenvalues must be >= 0");
  double acc = 0.0;
  for (Index i = 0; i < eigenvalues.size(); ++i)
    acc += 0.5 * std::log1p(eigenvalues[i] * p / sigma2);
  return acc;
}

struct ExitPoint {
  double v_in = 0.0;
  double v_out = 0.0;
};

struct ExitCurves {
  std::vector<ExitPoint> curve_a;  // v_in_A -> v_out_A
  std::vector<ExitPoint> curve_b;  // v_in_B -> v_out_B
  // Corner points of the alternating SE trajectory in the chart plane
  // (x = v_in_A, y = v_out_A = v_in_B).
  std::vector<std::pair<double, double>> staircase;
  double fixed_point_v_in_a = 0.0;  // = v_out_B at the fixed point
  double fixed_point_v_in_b = 0.0;  // = v_out_A at the fixed point
};

/// Transfer curves of both modules over a variance grid plus the SE staircase
/// from v_init.
inline ExitCurves exit_curves(const MmseFunction& mmse_a, const MmseFunction& mmse_b,
                              const std::vector<double>& v_grid, double v_init,
                              int max_steps = 64, double tolerance = 1e-12) {
  ExitCurves out;
  out.curve_a.reserve(v_grid.size());
  out.curve_b.reserve(v_grid.size());
  for (double v : v_grid) {
    if (!(v > 0.0)) throw std::invalid_argument("exit_curves: grid must be positive");
    out.curve_a.push_back({v, se_step(v, mmse_a).v_out});
    out.curve_b.push_back({v, se_step(v, mmse_b).v_out});
  }
  double x = v_init;  // v_in_A
  double y = se_step(x, mmse_a).v_out;
  out.staircase.emplace_back(x, y);
  for (int step = 0; step < max_steps; ++step) {
    const double x_next = se_step(y, mmse_b).v_out;
    out.staircase.emplace_back(x_next, y);
    const double y_next = se_step(x_next, mmse_a).v_out;
    out.staircase.emplace_back(x_next, y_next);
    const bool settled = std::abs(x_next - x) <= tolerance * std::max(1.0, std::abs(x)) &&
                         std::abs(y_next - y) <= tolerance * std::max(1.0, std::abs(y));
    x = x_next;
    y = y_next;
    if (settled) break;
  }
  out.fixed_point_v_in_a = x;
  out.fixed_point_v_in_b = y;
  return out;
}

}  // namespace scvamp
