#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "kitl/losses/losses.hpp"
#include "kitl/numcore/ops.hpp"

namespace kitl::losses {
namespace {

template <typename T>
class ClassMeansOp final : public Op<T> {
 public:
  std::string_view name() const override { return "class_means"; }
  bool differentiable_input(std::size_t i) const override { return i == 0; }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& x = *in[0];
    const Tensor<T>& labels = *in[1];
    if (x.rank() != 2 || labels.size() != x.dim(0)) {
      throw ShapeError("class_means: one label per row required, got " +
                       shape_str(x.shape()) + " vs " + shape_str(labels.shape()));
    }
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::size_t classes = 0;
    for (T v : labels.data()) {
      if (v < T{0} || v != std::floor(v)) {
        throw std::invalid_argument("class_means: labels must be non-negative integers");
      }
      classes = std::max(classes, static_cast<std::size_t>(v) + 1);
    }
    counts_.assign(classes, 0);
    std::vector<std::vector<std::size_t>> members(classes);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = static_cast<std::size_t>(labels[i]);
      ++counts_[c];
      members[c].push_back(i);
    }
    out.resize({classes, d});
    // Summing each coordinate in sorted order makes the mean independent of
    // the order of the support rows.
    std::vector<T> column;
    for (std::size_t c = 0; c < classes; ++c) {
      if (counts_[c] == 0) {
        throw std::invalid_argument("class_means: class " + std::to_string(c) +
                                    " has no instances");
      }
      for (std::size_t j = 0; j < d; ++j) {
        column.clear();
        for (std::size_t i : members[c]) column.push_back(x[i * d + j]);
        std::sort(column.begin(), column.end());
        long double acc = 0.0L;
        for (T v : column) acc += v;
        out[c * d + j] = static_cast<T>(acc / static_cast<long double>(counts_[c]));
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const Tensor<T>& labels = *in[1];
    const std::size_t n = in[0]->dim(0), d = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = static_cast<std::size_t>(labels[i]);
      const T inv = T{1} / static_cast<T>(counts_[c]);
      for (std::size_t j = 0; j < d; ++j) (*gin[0])[i * d + j] += gout[c * d + j] * inv;
    }
  }

 private:
  std::vector<std::size_t> counts_;
};

template <typename T>
class SquaredDistancesOp final : public Op<T> {
 public:
  std::string_view name() const override { return "squared_distances"; }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& q = *in[0];
    const Tensor<T>& p = *in[1];
    if (q.rank() != 2 || p.rank() != 2 || q.dim(1) != p.dim(1)) {
      throw ShapeError("squared_distances: embedding widths differ: " +
                       shape_str(q.shape()) + " vs " + shape_str(p.shape()));
    }
    const std::size_t n = q.dim(0), c = p.dim(0), d = q.dim(1);
    out.resize({n, c});
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = q.ptr() + i * d;
      for (std::size_t k = 0; k < c; ++k) {
        const T* pk = p.ptr() + k * d;
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T diff = qi[j] - pk[j];
          acc += diff * diff;
        }
        out[i * c + k] = acc;
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    const Tensor<T>& q = *in[0];
    const Tensor<T>& p = *in[1];
    const std::size_t n = q.dim(0), c = p.dim(0), d = q.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < c; ++k) {
        const T g2 = T{2} * gout[i * c + k];
        if (g2 == T{0}) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const T diff = q[i * d + j] - p[k * d + j];
          if (gin[0]) (*gin[0])[i * d + j] += g2 * diff;
          if (gin[1]) (*gin[1])[k * d + j] -= g2 * diff;
        }
      }
    }
  }
};

template <typename T>
Tensor<T> labels_to_tensor(std::span<const int> labels) {
  std::vector<T> v(labels.begin(), labels.end());
  return Tensor<T>({labels.size()}, std::move(v));
}

}  // namespace

template <typename T>
NodeId class_means(Graph<T>& g, NodeId x, NodeId labels) {
  return g.template emplace<ClassMeansOp<T>>({x, labels});
}

template <typename T>
NodeId squared_distances(Graph<T>& g, NodeId queries, NodeId prototypes) {
  return g.template emplace<SquaredDistancesOp<T>>({queries, prototypes});
}

template <typename T>
NodeId proto_log_probs(Graph<T>& g, NodeId queries, NodeId prototypes) {
  NodeId d = squared_distances(g, queries, prototypes);
  return ops::log_softmax_rows(g, ops::scale(g, d, T{-1}));
}

template <typename T>
NodeId proto_loss(Graph<T>& g, NodeId queries, NodeId query_labels, NodeId prototypes) {
  return ops::nll_mean(g, proto_log_probs(g, queries, prototypes), query_labels);
}

template <typename T>
NodeId softmax_xent(Graph<T>& g, NodeId logits, NodeId labels) {
  return ops::nll_mean(g, ops::log_softmax_rows(g, logits), labels);
}

template <typename T>
PrototypeSet<T> compute_prototypes(const Tensor<T>& support, std::span<const int> labels) {
  if (support.rank() != 2 || labels.size() != support.dim(0)) {
    throw ShapeError("compute_prototypes: one label per support row required, got " +
                     shape_str(support.shape()) + " with " + std::to_string(labels.size()) +
                     " labels");
  }
  PrototypeSet<T> set;
  set.classes.assign(labels.begin(), labels.end());
  std::sort(set.classes.begin(), set.classes.end());
  set.classes.erase(std::unique(set.classes.begin(), set.classes.end()), set.classes.end());
  std::map<int, int> dense;
  for (std::size_t i = 0; i < set.classes.size(); ++i) dense[set.classes[i]] = static_cast<int>(i);
  std::vector<int> local(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) local[i] = dense[labels[i]];

  Graph<T> g;
  class_means(g, g.leaf("x"), g.leaf("y"));
  g.bind("x", support);
  g.bind("y", labels_to_tensor<T>(local));
  set.means = g.forward();
  return set;
}

template <typename T>
Tensor<T> proto_log_probs(const Tensor<T>& queries, const PrototypeSet<T>& prototypes) {
  if (prototypes.classes.empty()) {
    throw std::invalid_argument("proto_log_probs: no prototypes");
  }
  Graph<T> g;
  proto_log_probs(g, g.leaf("q"), g.leaf("p"));
  g.bind("q", queries);
  g.bind("p", prototypes.means);
  return g.forward();
}

template <typename T>
T proto_loss(const Tensor<T>& queries, std::span<const int> labels,
             const PrototypeSet<T>& prototypes) {
  std::vector<int> local(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = std::lower_bound(prototypes.classes.begin(), prototypes.classes.end(), labels[i]);
    if (it == prototypes.classes.end() || *it != labels[i]) {
      throw std::invalid_argument("proto_loss: query label " + std::to_string(labels[i]) +
                                  " has no prototype");
    }
    local[i] = static_cast<int>(it - prototypes.classes.begin());
  }
  Graph<T> g;
  proto_loss(g, g.leaf("q"), g.leaf("y"), g.leaf("p"));
  g.bind("q", queries);
  g.bind("y", labels_to_tensor<T>(local));
  g.bind("p", prototypes.means);
  return g.forward().item();
}

template <typename T>
T softmax_xent(const Tensor<T>& logits, std::span<const int> labels) {
  Graph<T> g;
  softmax_xent(g, g.leaf("z"), g.leaf("y"));
  g.bind("z", logits);
  g.bind("y", labels_to_tensor<T>(labels));
  return g.forward().item();
}

#define KITL_INSTANTIATE_PROTO(T)                                                     \
  template NodeId class_means<T>(Graph<T>&, NodeId, NodeId);                          \
  template NodeId squared_distances<T>(Graph<T>&, NodeId, NodeId);                    \
  template NodeId proto_log_probs<T>(Graph<T>&, NodeId, NodeId);                      \
  template NodeId proto_loss<T>(Graph<T>&, NodeId, NodeId, NodeId);                   \
  template NodeId softmax_xent<T>(Graph<T>&, NodeId, NodeId);                         \
  template PrototypeSet<T> compute_prototypes<T>(const Tensor<T>&, std::span<const int>); \
  template Tensor<T> proto_log_probs<T>(const Tensor<T>&, const PrototypeSet<T>&);    \
  template T proto_loss<T>(const Tensor<T>&, std::span<const int>, const PrototypeSet<T>&); \
  template T softmax_xent<T>(const Tensor<T>&, std::span<const int>);

KITL_INSTANTIATE_PROTO(float)
KITL_INSTANTIATE_PROTO(double)

#undef KITL_INSTANTIATE_PROTO

}  // namespace kitl::losses
