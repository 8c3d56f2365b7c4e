#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kitl/numcore/tensor.hpp"

namespace kitl {

using NodeId = std::size_t;

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A primitive operation. Ops may cache whatever forward state their backward
// pass needs; a graph owns one instance per node.
template <typename T>
class Op {
 public:
  virtual ~Op() = default;

  virtual std::string_view name() const = 0;

  virtual void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) = 0;

  // Accumulates into gin[i]; gin[i] is null for inputs that need no gradient.
  virtual void backward(std::span<const Tensor<T>* const> in,
                        const Tensor<T>& out, const Tensor<T>& gout,
                        std::span<Tensor<T>* const> gin) = 0;

  // Inputs such as label vectors carry no gradient.
  virtual bool differentiable_input(std::size_t) const { return true; }

  // Fingerprint of the piecewise region the last forward landed in (relu
  // masks, pooling winners, histogram bins). Zero for smooth ops.
  virtual std::uint64_t kink_signature() const { return 0; }
};

inline std::uint64_t mix_hash(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

// Static computation graph: nodes are appended in dependency order, so the
// insertion order is a valid topological order. Leaves are named and bound
// before each forward pass; the graph can be re-evaluated any number of
// times with new bindings.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  NodeId leaf(std::string name) {
    if (leaf_index_.contains(name)) {
      throw GraphError("duplicate leaf name '" + name + "'");
    }
    Node node;
    node.leaf_name = name;
    nodes_.push_back(std::move(node));
    leaf_index_.emplace(std::move(name), nodes_.size() - 1);
    return nodes_.size() - 1;
  }

  NodeId apply(std::unique_ptr<Op<T>> op, std::vector<NodeId> inputs) {
    for (NodeId id : inputs) {
      if (id >= nodes_.size()) {
        throw GraphError(std::string(op->name()) + ": input node " +
                         std::to_string(id) + " does not exist");
      }
    }
    Node node;
    node.op = std::move(op);
    node.inputs = std::move(inputs);
    nodes_.push_back(std::move(node));
    output_ = nodes_.size() - 1;
    return nodes_.size() - 1;
  }

  template <typename OpT, typename... Args>
  NodeId emplace(std::vector<NodeId> inputs, Args&&... args) {
    return apply(std::make_unique<OpT>(std::forward<Args>(args)...),
                 std::move(inputs));
  }

  void set_output(NodeId id) {
    if (id >= nodes_.size()) throw GraphError("output node does not exist");
    output_ = id;
  }
  std::optional<NodeId> output() const { return output_; }

  bool has_leaf(std::string_view name) const {
    return leaf_index_.contains(std::string(name));
  }

  NodeId leaf_id(std::string_view name) const {
    auto it = leaf_index_.find(std::string(name));
    if (it == leaf_index_.end()) {
      throw GraphError("unknown leaf '" + std::string(name) + "'");
    }
    return it->second;
  }

  std::vector<std::string> leaf_names() const {
    std::vector<std::string> names;
    for (const auto& node : nodes_) {
      if (!node.op) names.push_back(node.leaf_name);
    }
    return names;
  }

  void bind(std::string_view name, Tensor<T> value) {
    Node& node = nodes_[leaf_id(name)];
    node.value = std::move(value);
    node.bound = true;
    evaluated_ = false;
  }

  // Mutable access for perturbation-based checks; invalidates the last
  // forward pass.
  Tensor<T>& leaf_value(std::string_view name) {
    Node& node = nodes_[leaf_id(name)];
    if (!node.bound) {
      throw GraphError("leaf '" + std::string(name) + "' is not bound");
    }
    evaluated_ = false;
    return node.value;
  }

  const Tensor<T>& forward();

  // Requires a prior forward pass and a scalar output.
  std::map<std::string, Tensor<T>> backward(const std::set<std::string>& wrt);

  const Tensor<T>& value(NodeId id) const {
    if (!evaluated_) throw GraphError("value() requested before forward");
    return nodes_.at(id).value;
  }

  const Op<T>* op(NodeId id) const { return nodes_.at(id).op.get(); }
  Op<T>* mutable_op(NodeId id) { return nodes_.at(id).op.get(); }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }
  bool evaluated() const { return evaluated_; }

  std::uint64_t kink_signature() const {
    std::uint64_t h = 0;
    for (const auto& node : nodes_) {
      if (node.op) h = mix_hash(h, node.op->kink_signature());
    }
    return h;
  }

 private:
  struct Node {
    std::unique_ptr<Op<T>> op;
    std::vector<NodeId> inputs;
    std::string leaf_name;
    Tensor<T> value;
    Tensor<T> grad;
    bool bound = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> leaf_index_;
  std::optional<NodeId> output_;
  bool evaluated_ = false;
};

template <typename T>
const Tensor<T>& Graph<T>::forward() {
  if (!output_) throw GraphError("graph has no output");
  std::vector<const Tensor<T>*> in;
  for (auto& node : nodes_) {
    if (!node.op) {
      if (!node.bound) {
        throw GraphError("leaf '" + node.leaf_name + "' is not bound");
      }
      continue;
    }
    in.clear();
    for (NodeId id : node.inputs) in.push_back(&nodes_[id].value);
    node.op->forward(in, node.value);
#ifndef NDEBUG
    if (!all_finite(node.value)) {
      throw GraphError(std::string(node.op->name()) +
                       ": non-finite value in forward output");
    }
#endif
  }
  evaluated_ = true;
  return nodes_[*output_].value;
}

template <typename T>
std::map<std::string, Tensor<T>> Graph<T>::backward(
    const std::set<std::string>& wrt) {
  if (!evaluated_) throw GraphError("backward called before forward");
  const NodeId out = *output_;
  if (nodes_[out].value.size() != 1) {
    throw GraphError("backward requires a scalar output, got shape " +
                     shape_str(nodes_[out].value.shape()));
  }
  for (const auto& name : wrt) leaf_id(name);

  // Forward sweep: which nodes depend on a requested leaf.
  std::vector<char> needs(nodes_.size(), 0);
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    Node& node = nodes_[i];
    if (!node.op) {
      needs[i] = wrt.contains(node.leaf_name) ? 1 : 0;
      continue;
    }
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (needs[node.inputs[j]] && node.op->differentiable_input(j)) {
        needs[i] = 1;
        break;
      }
    }
  }
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (needs[i]) nodes_[i].grad.resize(nodes_[i].value.shape(), true);
  }

  if (needs[out]) {
    nodes_[out].grad.fill(T{1});
    std::vector<const Tensor<T>*> in;
    std::vector<Tensor<T>*> gin;
    for (NodeId i = out + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.op || !needs[i]) continue;
      in.clear();
      gin.clear();
      for (std::size_t j = 0; j < node.inputs.size(); ++j) {
        NodeId src = node.inputs[j];
        in.push_back(&nodes_[src].value);
        bool want = needs[src] && node.op->differentiable_input(j);
        gin.push_back(want ? &nodes_[src].grad : nullptr);
      }
      node.op->backward(in, node.value, node.grad, gin);
    }
  }

  std::map<std::string, Tensor<T>> grads;
  for (const auto& name : wrt) {
    const Node& node = nodes_[leaf_id(name)];
    if (needs[out]) {
      grads.emplace(name, node.grad);
    } else {
      grads.emplace(name, Tensor<T>(node.value.shape()));
    }
  }
  return grads;
}

template <typename T>
using Bindings = std::map<std::string, Tensor<T>>;

// Binds every named input and evaluates the graph.
template <typename T>
const Tensor<T>& forward_eval(Graph<T>& graph, const Bindings<T>& inputs) {
  for (const auto& [name, value] : inputs) graph.bind(name, value);
  return graph.forward();
}

// Gradients of the scalar output for each requested leaf. Leaves the output
// does not depend on receive zero tensors.
template <typename T>
std::map<std::string, Tensor<T>> backward_grad(
    Graph<T>& graph, const std::set<std::string>& wrt) {
  return graph.backward(wrt);
}

}  // namespace kitl
