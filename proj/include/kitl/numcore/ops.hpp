#pragma once

#include <cstddef>
#include <string>

#include "kitl/numcore/graph.hpp"

// Graph builders for the primitive operations. Every builder validates
// shapes at forward time and reports the op name with the offending shapes.
namespace kitl::ops {

template <typename T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b, bool transpose_a = false,
              bool transpose_b = false);

// x[..., d] + bias[d]
template <typename T>
NodeId add_bias(Graph<T>& g, NodeId x, NodeId bias);

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId sub(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId scale(Graph<T>& g, NodeId x, T factor);

template <typename T>
NodeId exp(Graph<T>& g, NodeId x);
template <typename T>
NodeId log(Graph<T>& g, NodeId x);

template <typename T>
NodeId sum(Graph<T>& g, NodeId x);
template <typename T>
NodeId mean(Graph<T>& g, NodeId x);

template <typename T>
NodeId relu(Graph<T>& g, NodeId x);

// NHWC input, filter [k, k, in_channels, out_channels], bias [out_channels].
// Stride 1 with "same" zero padding for odd k.
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId filter, NodeId bias);

// 2x2 window, stride 2, floor semantics on odd extents.
template <typename T>
NodeId max_pool2(Graph<T>& g, NodeId x);

// Per-channel (last axis) normalization with batch statistics. The node
// exposes the batch mean and biased variance after each forward pass.
template <typename T>
NodeId batch_norm_train(Graph<T>& g, NodeId x, NodeId gamma, NodeId beta,
                        T epsilon);

// Per-channel normalization with supplied running statistics; the
// statistics inputs carry no gradient.
template <typename T>
NodeId batch_norm_eval(Graph<T>& g, NodeId x, NodeId gamma, NodeId beta,
                       NodeId running_mean, NodeId running_var, T epsilon);

template <typename T>
struct BatchStats {
  const Tensor<T>& mean;
  const Tensor<T>& variance;
};

template <typename T>
BatchStats<T> batch_norm_stats(const Graph<T>& g, NodeId bn_node);

// [n, ...] -> [n, prod(...)]
template <typename T>
NodeId flatten(Graph<T>& g, NodeId x);

// Row-wise x / max(||x||, epsilon). epsilon = 0 disables the guard and makes
// a zero row an error.
template <typename T>
NodeId l2_normalize_rows(Graph<T>& g, NodeId x, T epsilon);

// Row-wise x - logsumexp(x), stabilized by the row maximum.
template <typename T>
NodeId log_softmax_rows(Graph<T>& g, NodeId x);

// -mean_i logp[i, labels[i]]; labels hold integral class indices.
template <typename T>
NodeId nll_mean(Graph<T>& g, NodeId log_probs, NodeId labels);

// out[i, ...] = x[index[i], ...]; index holds integral row numbers.
template <typename T>
NodeId select_rows(Graph<T>& g, NodeId x, NodeId index);

}  // namespace kitl::ops
