#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "kitl/cli/cli.hpp"
#include "kitl/datapipe/datapipe.hpp"
#include "kitl/losses/losses.hpp"
#include "kitl/numcore/gradcheck.hpp"
#include "kitl/numcore/ops.hpp"

namespace kitl::cli {

namespace {

constexpr double kStructuralZero = 1e-12;

Tensor<double> as_labels(const std::vector<int>& labels) {
  return Tensor<double>({labels.size()}, std::vector<double>(labels.begin(), labels.end()));
}

Tensor<double> random_inputs(nn::Arch arch, std::size_t count, std::uint64_t seed) {
  Shape shape = nn::input_shape(arch);
  shape.insert(shape.begin(), count);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

GradcheckCase check_case(std::string name, Graph<double>& graph, const std::vector<std::string>& leaves,
                         const std::vector<std::string>& structurally_zero, std::size_t max_coords,
                         std::uint64_t seed) {
  GradcheckCase out;
  out.name = std::move(name);
  for (const auto& leaf : leaves) {
    if (std::ranges::find(structurally_zero, leaf) != structurally_zero.end()) {
      graph.forward();
      const auto grad = graph.backward({leaf}).at(leaf);
      for (double v : grad.data()) {
        if (std::abs(v) >= kStructuralZero) {
          out.pass = false;
          out.max_rel_err = std::max(out.max_rel_err, std::abs(v));
        }
      }
      out.checked += grad.size();
      continue;
    }
    GradcheckOptions opts;
    opts.max_coords = max_coords;
    opts.seed = data::splitmix64(seed ^ data::fnv1a(leaf));
    const auto report = check_gradient(graph, leaf, kGradcheckEpsilon, kGradcheckTolerance, opts);
    out.max_rel_err = std::max(out.max_rel_err, report.max_rel_err);
    out.checked += report.checked;
    out.skipped_kinks += report.skipped_kinks;
    out.unresolved_zeros += report.unresolved_zeros;
    out.pass = out.pass && report.pass;
  }
  if (!out.pass) {
    GradcheckOptions opts;
    opts.max_coords = std::max<std::size_t>(max_coords, 16);
    opts.seed = seed;
    std::set<std::string> seen;
    for (const auto& op : check_ops(graph, kGradcheckEpsilon, kGradcheckTolerance, opts)) {
      if (!op.pass && seen.insert(op.op).second) out.failing_ops.push_back(op.op);
    }
  }
  return out;
}

bool GradcheckReport::pass() const {
  return std::ranges::all_of(cases, [](const GradcheckCase& c) { return c.pass; });
}

std::string GradcheckReport::text() const {
  std::ostringstream out;
  std::size_t failed = 0;
  for (const auto& c : cases) {
    out << (c.pass ? "ok   " : "FAIL ") << c.name << " max_rel_err=" << c.max_rel_err
        << " checked=" << c.checked << " skipped_kinks=" << c.skipped_kinks
        << " unresolved_zeros=" << c.unresolved_zeros;
    if (!c.failing_ops.empty()) {
      out << " failing_ops=";
      for (std::size_t i = 0; i < c.failing_ops.size(); ++i) out << (i ? "," : "") << c.failing_ops[i];
    }
    out << '\n';
    if (!c.pass) ++failed;
  }
  out << cases.size() - failed << "/" << cases.size() << " gradient checks passed\n";
  return out.str();
}

GradcheckReport gradcheck_suite(std::uint64_t seed, std::size_t seeds) {
  constexpr std::size_t kClasses = 3;
  constexpr std::size_t kPerClass = 2;
  constexpr std::size_t kCoordsPerLeaf = 4;
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};

  GradcheckReport report;
  for (nn::Arch arch : {nn::Arch::mnist, nn::Arch::isolet, nn::Arch::omniglot, nn::Arch::tinyimagenet}) {
    for (std::uint64_t s = seed; s < seed + seeds; ++s) {
      const std::uint64_t point = data::stream_seed(s, 0, "gradcheck", static_cast<std::uint64_t>(arch));
      const auto built = nn::build_architecture(arch, kClasses, point);
      const auto absorbed = built.model.batch_norm_absorbed_params();
      const Tensor<double> x = random_inputs(arch, kClasses * kPerClass, data::splitmix64(point));
      std::vector<std::string> model_leaves;
      for (const auto& [name, p] : built.model.params()) model_leaves.push_back(name);
      const std::string suffix = "/" + std::string(nn::arch_name(arch)) + "/seed" + std::to_string(s);

      {
        Graph<double> g;
        const auto nodes = built.model.build(g, g.leaf("x"), nn::Mode::train);
        losses::histogram_loss_on_embeddings(g, nodes.embedding, g.leaf("y"), losses::kDefaultBins);
        built.model.bind(g);
        g.bind("x", x);
        g.bind("y", as_labels(labels));
        report.cases.push_back(check_case("histogram" + suffix, g, model_leaves, absorbed, kCoordsPerLeaf, point));
      }
      {
        Graph<double> g;
        const auto nodes = built.model.build(g, g.leaf("x"), nn::Mode::train);
        const NodeId support = ops::select_rows(g, nodes.embedding, g.leaf("support_rows"));
        const NodeId queries = ops::select_rows(g, nodes.embedding, g.leaf("query_rows"));
        losses::proto_loss(g, queries, g.leaf("query_y"), losses::class_means(g, support, g.leaf("y")));
        built.model.bind(g);
        g.bind("x", x);
        g.bind("support_rows", as_labels({0, 2, 4}));
        g.bind("query_rows", as_labels({1, 3, 5}));
        g.bind("y", as_labels({0, 1, 2}));
        g.bind("query_y", as_labels({0, 1, 2}));
        report.cases.push_back(check_case("prototype" + suffix, g, model_leaves, absorbed, kCoordsPerLeaf, point));
      }
      {
        Graph<double> g;
        const auto nodes = built.model.build(g, g.leaf("x"), nn::Mode::train);
        losses::softmax_xent(g, built.head->build(g, nodes.embedding), g.leaf("y"));
        built.model.bind(g);
        built.head->bind(g);
        g.bind("x", x);
        g.bind("y", as_labels(labels));
        auto leaves = model_leaves;
        leaves.emplace_back(nn::ClassifierHead::kWeightName);
        leaves.emplace_back(nn::ClassifierHead::kBiasName);
        report.cases.push_back(check_case("softmax_xent" + suffix, g, leaves, absorbed, kCoordsPerLeaf, point));
      }
    }
  }
  return report;
}

}  // namespace kitl::cli
