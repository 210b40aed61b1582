#pragma once

#include "scvamp/types.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>

namespace scvamp {

/// Deterministic counter-based random stream.
///
/// Output i is a two-round SplitMix64-style mix of the counter with the
/// stream key injected between rounds, so streams with different keys are
/// unrelated keyed permutations of the counter rather than shifted copies of
/// one sequence. The construction is part of the file/trace format contract
/// and is fixed across releases.
///
/// `split(label)` derives a child stream as a pure function of (key, label):
/// it does not advance the parent, so per-instance sub-streams are
/// order-insensitive and safe to hand out to parallel workers.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_(mix(seed + kGamma)) {}

  std::uint64_t next_u64() {
    return mix(mix(counter_++ * kGamma + kGamma) ^ key_);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on (-1, 1); used by the polar Gaussian sampler.
  double uniform_sym() { return 2.0 * uniform01() - 1.0; }

  /// Standard normal via the polar (Marsaglia) method. Rejection-based but
  /// exactly reproducible for a given call sequence; the spare value is part
  /// of the stream state.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0, v = 0.0, s = 0.0;
    do {
      u = uniform_sym();
      v = uniform_sym();
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  /// Child stream keyed on (parent key, label). Pure: does not consume
  /// parent state, and the same label always yields the same child.
  [[nodiscard]] RngStream split(std::string_view label) const {
    RngStream child(0);
    child.key_ = mix(mix(key_ + kGamma) ^ fnv1a(label));
    child.counter_ = 0;
    child.has_spare_ = false;
    return child;
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// i.i.d. N(mean, var) entries; var == 0 yields a constant vector.
inline Vector sample_gaussian_vector(RngStream& rng, Index n, double mean, double var) {
  if (var < 0.0) throw std::invalid_argument("sample_gaussian_vector: variance must be >= 0");
  Vector out(n);
  if (var == 0.0) {
    out.setConstant(mean);
    return out;
  }
  const double sd = std::sqrt(var);
  for (Index i = 0; i < n; ++i) out[i] = mean + sd * rng.gaussian();
  return out;
}

inline Matrix sample_gaussian_matrix(RngStream& rng, Index rows, Index cols) {
  Matrix out(rows, cols);
  // Column-major fill order; part of the reproducibility contract.
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = rng.gaussian();
  return out;
}

}  // namespace scvamp
