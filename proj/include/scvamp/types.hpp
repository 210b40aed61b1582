#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string_view>

namespace scvamp {

template <class Scalar, int Rows = Eigen::Dynamic, int Cols = Eigen::Dynamic>
using mat_type = Eigen::Matrix<Scalar, Rows, Cols>;

template <class Scalar, int Rows = Eigen::Dynamic>
using vec_type = Eigen::Matrix<Scalar, Rows, 1>;

using Index = Eigen::Index;
using Vector = vec_type<double>;
using Matrix = mat_type<double>;

inline constexpr std::string_view kVersion = "0.1.0";

// Fixed-order pairwise reduction. Every batch statistic in the library is
// accumulated through this so results do not depend on how callers partition
// work across threads.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double acc = 0.0;
    for (double x : xs) acc += x;
    return acc;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

}  // namespace scvamp
