#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "kitl/numcore/graph.hpp"

namespace kitl {

struct GradientReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  // Coordinates whose +/- epsilon probes left the piecewise region of the
  // base point (relu mask, pooling winner or histogram bin changed).
  std::size_t skipped_kinks = 0;
  // Coordinates where backward reports an exact zero and the central
  // difference is below the relative-error floor. Rounding in f alone moves
  // the difference by about ulp(f)/eps, so no relative error is measurable.
  std::size_t unresolved_zeros = 0;
  std::size_t worst_index = 0;
};

inline constexpr double kRelativeFloor = 1e-8;
inline constexpr double kZeroGradient = 1e-12;

inline bool unresolved_zero(double analytic, double numeric) {
  return std::abs(analytic) < kZeroGradient && std::abs(numeric) < kRelativeFloor;
}

struct GradcheckOptions {
  // 0 checks every coordinate; otherwise a seeded sample of this many.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelativeFloor});
  return std::abs(analytic - numeric) / denom;
}

// Compares backward_grad against central differences
// (f(x+eps) - f(x-eps)) / 2eps for one bound leaf. The graph output must be
// scalar. Leaves the graph evaluated at the original point.
inline GradientReport check_gradient(Graph<double>& graph, const std::string& leaf,
                                     double epsilon, double tolerance,
                                     const GradcheckOptions& options = {}) {
  if (!(epsilon > 0.0)) {
    throw std::invalid_argument("check_gradient: epsilon must be positive");
  }
  graph.forward();
  const std::uint64_t base_signature = graph.kink_signature();
  const Tensor<double> analytic = graph.backward({leaf}).at(leaf);

  const std::size_t n = graph.leaf_value(leaf).size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t budget = order.size();
  if (options.max_coords > 0 && options.max_coords < order.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(order.begin(), order.end(), rng);
    budget = options.max_coords;
  }

  GradientReport report;
  for (std::size_t idx : order) {
    if (report.checked + report.unresolved_zeros >= budget) break;
    const double saved = graph.leaf_value(leaf)[idx];
    graph.leaf_value(leaf)[idx] = saved + epsilon;
    const double f_plus = graph.forward().item();
    const bool plus_same = graph.kink_signature() == base_signature;
    graph.leaf_value(leaf)[idx] = saved - epsilon;
    const double f_minus = graph.forward().item();
    const bool minus_same = graph.kink_signature() == base_signature;
    graph.leaf_value(leaf)[idx] = saved;
    if (!plus_same || !minus_same) {
      ++report.skipped_kinks;
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
    if (unresolved_zero(analytic[idx], numeric)) {
      ++report.unresolved_zeros;
      continue;
    }
    const double err = relative_error(analytic[idx], numeric);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_index = idx;
    }
    ++report.checked;
  }
  report.pass = report.max_rel_err < tolerance;
  graph.forward();
  return report;
}

struct OpCheck {
  NodeId node = 0;
  std::string op;
  double max_rel_err = 0.0;
  bool pass = true;
};

// Checks every op node in isolation at its current inputs: the vector-Jacobian
// product of backward against central differences of forward, along a random
// cotangent. Localizes a failing whole-graph check to the ops at fault.
inline std::vector<OpCheck> check_ops(Graph<double>& graph, double epsilon, double tolerance,
                                      const GradcheckOptions& options = {}) {
  graph.forward();
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal;
  std::vector<OpCheck> results;
  for (NodeId id = 0; id < graph.size(); ++id) {
    Op<double>* op = graph.mutable_op(id);
    if (!op) continue;
    std::vector<Tensor<double>> inputs;
    for (NodeId src : graph.inputs(id)) inputs.push_back(graph.value(src));
    std::vector<const Tensor<double>*> in;
    for (const auto& t : inputs) in.push_back(&t);
    Tensor<double> out;
    op->forward(in, out);
    const std::uint64_t base = op->kink_signature();
    Tensor<double> cotangent(out.shape());
    for (auto& v : cotangent.data()) v = normal(rng);
    std::vector<Tensor<double>> grads;
    for (const auto& t : inputs) grads.emplace_back(t.shape(), 0.0);
    std::vector<Tensor<double>*> gin;
    for (std::size_t j = 0; j < grads.size(); ++j) {
      gin.push_back(op->differentiable_input(j) ? &grads[j] : nullptr);
    }
    op->backward(in, out, cotangent, gin);

    OpCheck check{id, std::string(op->name()), 0.0, true};
    Tensor<double> probe;
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      if (!gin[j]) continue;
      std::vector<std::size_t> coords(inputs[j].size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      std::shuffle(coords.begin(), coords.end(), rng);
      if (options.max_coords > 0 && coords.size() > options.max_coords) coords.resize(options.max_coords);
      for (std::size_t c : coords) {
        const double saved = inputs[j][c];
        double f[2];
        bool same = true;
        for (int side = 0; side < 2; ++side) {
          inputs[j][c] = saved + (side == 0 ? epsilon : -epsilon);
          op->forward(in, probe);
          same = same && op->kink_signature() == base;
          double dot = 0.0;
          for (std::size_t i = 0; i < probe.size(); ++i) dot += probe[i] * cotangent[i];
          f[side] = dot;
        }
        inputs[j][c] = saved;
        if (!same) continue;
        const double err = relative_error(grads[j][c], (f[0] - f[1]) / (2.0 * epsilon));
        check.max_rel_err = std::max(check.max_rel_err, err);
      }
    }
    check.pass = check.max_rel_err < tolerance;
    results.push_back(std::move(check));
  }
  // Restore every op's cached forward state.
  graph.forward();
  return results;
}

}  // namespace kitl
