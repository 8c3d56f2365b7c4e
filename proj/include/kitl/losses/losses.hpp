#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kitl/numcore/graph.hpp"

namespace kitl::losses {

inline constexpr int kDefaultBins = 200;
inline constexpr double kSimilaritySlack = 1e-6;

// Location of a similarity on the B equally spaced nodes t_r = -1 + r*delta:
// it lies between nodes `lower` and `lower + 1` and sends `upper_weight` of
// its mass to the upper node, the rest to the lower one.
struct BinPosition {
  std::size_t lower = 0;
  double upper_weight = 0.0;
};

BinPosition locate_bin(double similarity, int bins);

inline double bin_spacing(int bins) { return 2.0 / (bins - 1); }

// Linear-interpolation histogram estimates of the positive and negative
// similarity distributions.
struct SimilarityHistogram {
  int bins = kDefaultBins;
  std::vector<double> h_pos;
  std::vector<double> h_neg;

  double delta() const { return bin_spacing(bins); }
  double node(std::size_t r) const { return -1.0 + static_cast<double>(r) * delta(); }
};

// Normalized interpolated histogram of one similarity set.
std::vector<double> histogram_estimate(std::span<const double> similarities, int bins);

SimilarityHistogram histogram_estimate(std::span<const double> positives,
                                       std::span<const double> negatives, int bins);

// sum_r h_neg[r] * sum_{q <= r} h_pos[q]
double histogram_loss_value(const SimilarityHistogram& hist);

// --- graph builders ---------------------------------------------------------

// Gram matrix of row-normalized embeddings.
template <typename T>
NodeId cosine_similarity_matrix(Graph<T>& g, NodeId normalized);

// Histogram loss over the strict upper triangle of a similarity matrix.
// Errors at forward time when S+ or S- is empty.
template <typename T>
NodeId histogram_loss(Graph<T>& g, NodeId similarities, NodeId labels, int bins);

// L2 normalization, cosine similarities, then histogram loss.
template <typename T>
NodeId histogram_loss_on_embeddings(Graph<T>& g, NodeId embeddings, NodeId labels,
                                    int bins);

// Row c is the mean of the rows with label c; labels are dense 0..C-1 and
// every class must be present.
template <typename T>
NodeId class_means(Graph<T>& g, NodeId x, NodeId labels);

// out[i, c] = ||q_i - p_c||^2
template <typename T>
NodeId squared_distances(Graph<T>& g, NodeId queries, NodeId prototypes);

template <typename T>
NodeId proto_log_probs(Graph<T>& g, NodeId queries, NodeId prototypes);

// Negative mean log-likelihood of the query labels under the prototype
// softmax.
template <typename T>
NodeId proto_loss(Graph<T>& g, NodeId queries, NodeId query_labels,
                  NodeId prototypes);

template <typename T>
NodeId softmax_xent(Graph<T>& g, NodeId logits, NodeId labels);

// --- tensor-level operations ------------------------------------------------

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& embeddings, T epsilon = T(1e-12));

// Requires unit rows (within 1e-6).
template <typename T>
Tensor<T> cosine_similarity_matrix(const Tensor<T>& normalized);

double histogram_loss(const Tensor<double>& embeddings, std::span<const int> labels,
                      int bins = kDefaultBins);

template <typename T>
struct PrototypeSet {
  std::vector<int> classes;  // ascending class ids; row order of `means`
  Tensor<T> means;           // [classes.size(), dim]
};

template <typename T>
PrototypeSet<T> compute_prototypes(const Tensor<T>& support_embeddings,
                                   std::span<const int> support_labels);

// [queries, classes] log-probabilities, columns ordered as prototypes.classes.
template <typename T>
Tensor<T> proto_log_probs(const Tensor<T>& query_embeddings,
                          const PrototypeSet<T>& prototypes);

template <typename T>
T proto_loss(const Tensor<T>& query_embeddings, std::span<const int> query_labels,
             const PrototypeSet<T>& prototypes);

template <typename T>
T softmax_xent(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace kitl::losses
