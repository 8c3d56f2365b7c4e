#pragma once

// Independent reference computations for the loss tests. Nothing here calls
// into the library's histogram or prototype code.

#include <cmath>
#include <vector>

#include "kitl/numcore/tensor.hpp"

namespace kitl::testing {

// Triangular kernel weight of similarity s on node r.
inline double node_weight(double s, int r, int bins) {
  const double delta = 2.0 / (bins - 1);
  const double t = -1.0 + r * delta;
  return std::max(0.0, 1.0 - std::abs(s - t) / delta);
}

// Pairwise expansion: mean over (s-, s+) of sum_r w_r(s-) sum_{q<=r} w_q(s+).
inline double pairwise_histogram_loss(const std::vector<double>& pos,
                                      const std::vector<double>& neg, int bins) {
  double total = 0.0;
  for (double sn : neg) {
    for (double sp : pos) {
      double pair = 0.0;
      for (int r = 0; r < bins; ++r) {
        const double wn = node_weight(sn, r, bins);
        if (wn == 0.0) continue;
        double cum = 0.0;
        for (int q = 0; q <= r; ++q) cum += node_weight(sp, q, bins);
        pair += wn * cum;
      }
      total += pair;
    }
  }
  return total / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

struct PairSets {
  std::vector<double> pos;
  std::vector<double> neg;
};

inline PairSets cosine_pairs(const Tensor<double>& e, const std::vector<int>& labels) {
  const std::size_t n = e.dim(0), d = e.dim(1);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += e[i * d + j] * e[i * d + j];
    norms[i] = std::sqrt(ss);
  }
  PairSets sets;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = i + 1; k < n; ++k) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += e[i * d + j] * e[k * d + j];
      const double s = std::clamp(dot / (norms[i] * norms[k]), -1.0, 1.0);
      (labels[i] == labels[k] ? sets.pos : sets.neg).push_back(s);
    }
  }
  return sets;
}

}  // namespace kitl::testing
