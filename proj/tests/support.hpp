#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "lowrank/linalg.hpp"
#include "lowrank/model.hpp"
#include "lowrank/tensor.hpp"

namespace lowrank::tu {

inline Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor random_batch(const Dims4& d, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return random_tensor({d.b, d.c, d.n, d.m}, seed, lo, hi);
}

inline linalg::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  linalg::Matrix a(rows, cols);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) a(i, j) = dist(rng);
  return a;
}

inline Labels random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Labels y(n);
  for (auto& v : y) v = static_cast<std::uint32_t>(rng() % classes);
  return y;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double frobenius(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Model with seeded weights, not trained.
inline model::Model seeded_model(model::Architecture arch, std::size_t c, std::size_t n,
                                 std::size_t m, std::size_t classes, std::uint64_t seed) {
  auto spec = model::reference_spec(arch, c, n, m, classes);
  return {spec, model::init_params(spec, seed)};
}

}  // namespace lowrank::tu
