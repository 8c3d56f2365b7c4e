#pragma once

#include <random>

#include "kitl/numcore/tensor.hpp"

namespace kitl::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng,
                                    double stddev = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor<double> label_tensor(const std::vector<int>& labels) {
  std::vector<double> v(labels.begin(), labels.end());
  return Tensor<double>({labels.size()}, std::move(v));
}

}  // namespace kitl::testing
