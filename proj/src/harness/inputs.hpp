#pragma once

// Seeded input generation shared by the harness commands.

#include <cstdint>
#include <random>
#include <vector>

#include "fk/tensor.hpp"

namespace fk::harness::detail {

inline std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline Matrix<double> uniform_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double lo = -1.0,
                                     double hi = 1.0) {
  return Matrix<double>(rows, cols, uniform(rng, rows * cols, lo, hi));
}

inline std::vector<std::int64_t> random_targets(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<std::int64_t> dist(0, static_cast<std::int64_t>(vocab) - 1);
  std::vector<std::int64_t> t(n);
  for (auto& x : t) x = dist(rng);
  return t;
}

// Values representable in T, so both precisions see the same inputs.
template <Real T>
std::vector<double> rounded(std::vector<double> v) {
  for (auto& x : v) x = static_cast<double>(static_cast<T>(x));
  return v;
}

template <Real T>
Matrix<double> rounded(const Matrix<double>& m) {
  return m.cast<T>().template cast<double>();
}

}  // namespace fk::harness::detail
