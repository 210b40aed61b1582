#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "scvamp/diagnostics.hpp"
#include "scvamp/rng.hpp"

#include <cmath>

using namespace scvamp;

namespace {

Vector laplace_samples(RngStream& rng, Index n, double scale) {
  Vector out(n);
  for (Index i = 0; i < n; ++i) {
    const double u = rng.uniform01() - 0.5;
    out[i] = -scale * (u < 0 ? -1.0 : 1.0) * std::log1p(-2.0 * std::abs(u));
  }
  return out;
}

// KL(p || q) for scalar densities by trapezoid integration.
double kl_numeric(const std::function<double(double)>& p, const std::function<double(double)>& q,
                  double lo, double hi, int cells) {
  const double h = (hi - lo) / cells;
  double acc = 0.0;
  for (int i = 0; i <= cells; ++i) {
    const double x = lo + h * i;
    const double w = (i == 0 || i == cells) ? 0.5 : 1.0;
    const double px = p(x);
    if (px > 0.0) acc += w * px * std::log(px / q(x));
  }
  return acc * h;
}

}  // namespace

TEST_CASE("kurtosis of an alternating rademacher sequence") {
  const Index n = 10'000;
  Vector x(n);
  for (Index i = 0; i < n; ++i) x[i] = (i % 2 == 0) ? 1.0 : -1.0;
  CHECK(excess_kurtosis(x) == doctest::Approx(-2.0).epsilon(1e-3));
}

TEST_CASE("kurtosis of gaussian draws is near zero") {
  RngStream rng(91);
  const Vector x = sample_gaussian_vector(rng, 1'000'000, 0.0, 1.0);
  CHECK(std::abs(excess_kurtosis(x)) < 0.02);
}

TEST_CASE("kurtosis of laplace draws is three") {
  RngStream rng(92);
  const Vector x = laplace_samples(rng, 1'000'000, 1.0);
  CHECK(excess_kurtosis(x) == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("kurtosis rejects degenerate input") {
  CHECK_THROWS_AS(excess_kurtosis(Vector::Ones(100)), std::invalid_argument);
  CHECK_THROWS_AS(excess_kurtosis(Vector::Ones(3)), std::invalid_argument);
}

TEST_CASE("kl estimate of matched gaussians sits in the bias band") {
  RngStream rng(93);
  const double v = 1.7;
  const Vector x = sample_gaussian_vector(rng, 100'000, 0.0, v);
  int window = 0;
  const double kl = kl_to_gaussian(x, v, &window);
  CHECK(window == 316);
  CHECK(kl >= kKlBiasBandLo);
  CHECK(kl <= kKlBiasBandHi);
}

TEST_CASE("kl estimate catches a variance mismatch") {
  RngStream rng(94);
  const double v = 0.8;
  const Vector x = sample_gaussian_vector(rng, 100'000, 0.0, 2.0 * v);
  // KL(N(0,2v) || N(0,v)) = (2 - 1 - ln 2)/2.
  const double truth = 0.5 * (2.0 - 1.0 - std::log(2.0));
  CHECK(kl_to_gaussian(x, v) == doctest::Approx(truth).epsilon(0.1));
}

TEST_CASE("kl estimate of laplace data against the matched-variance gaussian") {
  RngStream rng(95);
  const Vector x = laplace_samples(rng, 200'000, 1.0);  // variance 2
  auto laplace_pdf = [](double t) { return 0.5 * std::exp(-std::abs(t)); };
  auto gauss_pdf = [](double t) {
    return std::exp(-t * t / 4.0) / std::sqrt(4.0 * M_PI);
  };
  const double truth = kl_numeric(laplace_pdf, gauss_pdf, -30.0, 30.0, 600'000);
  CHECK(truth == doctest::Approx(0.0724).epsilon(0.02));  // frozen from the oracle
  CHECK(kl_to_gaussian(x, 2.0) == doctest::Approx(truth).epsilon(0.2).scale(0.01));
}

TEST_CASE("kl estimator is calibrated across 100 seeds") {
  for (int seed = 0; seed < 100; ++seed) {
    RngStream rng(1000 + static_cast<std::uint64_t>(seed));
    const Vector x = sample_gaussian_vector(rng, 100'000, 0.0, 1.0);
    const double kl = kl_to_gaussian(x, 1.0);
    CHECK(kl >= kKlBiasBandLo);
    CHECK(kl <= kKlBiasBandHi);
  }
}

TEST_CASE("kl estimate input validation") {
  RngStream rng(96);
  const Vector x = sample_gaussian_vector(rng, 2000, 0.0, 1.0);
  CHECK_THROWS_AS(kl_to_gaussian(x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(kl_to_gaussian(x.head(100), 1.0), std::invalid_argument);
}

TEST_CASE("decoupling report passes synthetic gaussian errors") {
  RngStream rng(97);
  const Index instances = 100, n = 1000;
  const double v = 0.37;
  Matrix errors(instances, n);
  for (Index i = 0; i < instances; ++i)
    errors.row(i) = sample_gaussian_vector(rng, n, 0.0, v).transpose();
  DecouplingThresholds tight;
  tight.variance_rel_tol = 0.02;
  tight.kurtosis_max = 0.05;
  const GaussianityReport report = error_decoupling_report(errors, v, 5, tight);
  CHECK(report.sample_count == instances * n);
  CHECK(report.pass_variance);
  CHECK(report.pass_kurtosis);
  CHECK(report.pass_kl);
  CHECK(report.pass_autocorrelation);
  CHECK(report.pass_all);
  CHECK(report.max_abs_autocorrelation < 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("decoupling report flags maximally correlated errors") {
  RngStream rng(98);
  const Index instances = 10, n = 200;
  Matrix errors(instances, n);
  for (Index i = 0; i < instances; ++i) {
    // Constant within each instance: lag-1 autocorrelation ~ 1.
    errors.row(i).setConstant(rng.gaussian());
  }
  const GaussianityReport report = error_decoupling_report(errors, 1.0, 3);
  CHECK(report.max_abs_autocorrelation > 0.9);
  CHECK_FALSE(report.pass_autocorrelation);
  CHECK_FALSE(report.pass_all);
}
