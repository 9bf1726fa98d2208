#pragma once

// Parameter initialisers driven by a caller-owned 64-bit Mersenne Twister.

#include "gig/tensor.hpp"

#include <random>

namespace gig {

/// Uniform in [-a, a] with a = sqrt(6 / (rows + cols)).
inline Parameter xavier_uniform(std::string name, Shape shape, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(shape.rows + shape.cols));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> v(shape.size());
  for (auto& x : v) x = u(rng);
  return Parameter(std::move(name), Tensor(shape, std::move(v)));
}

inline Parameter normal_init(std::string name, Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(shape.size());
  for (auto& x : v) x = n(rng);
  return Parameter(std::move(name), Tensor(shape, std::move(v)));
}

inline Parameter constant_init(std::string name, Shape shape, double value = 0.0) {
  return Parameter(std::move(name), Tensor(shape, value));
}

}  // namespace gig
