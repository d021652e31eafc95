#pragma once

#include "hair/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace testing {

template <typename Scalar = double>
hair::Tensor<Scalar> uniform(hair::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  hair::Tensor<Scalar> t(std::move(shape));
  for (hair::Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
double max_abs_diff(const hair::Tensor<Scalar>& a, const hair::Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return static_cast<double>((a.vec() - b.vec()).cwiseAbs().maxCoeff());
}

template <typename Scalar>
double max_abs(const hair::Tensor<Scalar>& a) {
  return static_cast<double>(a.vec().cwiseAbs().maxCoeff());
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace testing
