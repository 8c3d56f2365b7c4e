#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kitl/losses/losses.hpp"
#include "kitl/numcore/ops.hpp"

namespace kitl::losses {

BinPosition locate_bin(double s, int bins) {
  if (bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
  if (!(s >= -1.0 - kSimilaritySlack && s <= 1.0 + kSimilaritySlack)) {
    throw std::domain_error("similarity " + std::to_string(s) + " outside [-1, 1]");
  }
  s = std::clamp(s, -1.0, 1.0);
  const double pos = (s + 1.0) / bin_spacing(bins);
  std::size_t lower = static_cast<std::size_t>(std::floor(pos));
  lower = std::min(lower, static_cast<std::size_t>(bins - 2));
  return {lower, std::clamp(pos - static_cast<double>(lower), 0.0, 1.0)};
}

std::vector<double> histogram_estimate(std::span<const double> sims, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  if (sims.empty()) return h;
  const double w = 1.0 / static_cast<double>(sims.size());
  for (double s : sims) {
    const BinPosition b = locate_bin(s, bins);
    h[b.lower] += w * (1.0 - b.upper_weight);
    h[b.lower + 1] += w * b.upper_weight;
  }
  return h;
}

SimilarityHistogram histogram_estimate(std::span<const double> positives,
                                       std::span<const double> negatives, int bins) {
  return {bins, histogram_estimate(positives, bins), histogram_estimate(negatives, bins)};
}

double histogram_loss_value(const SimilarityHistogram& hist) {
  double cdf = 0.0;
  double loss = 0.0;
  for (std::size_t r = 0; r < hist.h_pos.size(); ++r) {
    cdf += hist.h_pos[r];
    loss += hist.h_neg[r] * cdf;
  }
  return loss;
}

namespace {

template <typename T>
class HistogramLossOp final : public Op<T> {
 public:
  explicit HistogramLossOp(int bins) : bins_(bins) {
    if (bins < 2) throw std::invalid_argument("histogram_loss: bins must be >= 2");
  }
  std::string_view name() const override { return "histogram_loss"; }
  bool differentiable_input(std::size_t i) const override { return i == 0; }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out) override {
    const Tensor<T>& sims = *in[0];
    const Tensor<T>& labels = *in[1];
    if (sims.rank() != 2 || sims.dim(0) != sims.dim(1) || labels.size() != sims.dim(0)) {
      throw ShapeError("histogram_loss: expects an [n,n] similarity matrix and n labels, got " +
                       shape_str(sims.shape()) + " vs " + shape_str(labels.shape()));
    }
    const std::size_t n = sims.dim(0);
    pairs_.clear();
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        Pair p;
        p.flat = i * n + j;
        p.positive = labels[i] == labels[j];
        p.bin = locate_bin(static_cast<double>(sims[p.flat]), bins_);
        n_pos += p.positive ? 1 : 0;
        pairs_.push_back(p);
      }
    }
    n_pos_ = n_pos;
    n_neg_ = pairs_.size() - n_pos;
    if (n_pos_ == 0) {
      throw std::invalid_argument(
          "histogram_loss: positive similarity set S+ is empty (no class has two instances)");
    }
    if (n_neg_ == 0) {
      throw std::invalid_argument(
          "histogram_loss: negative similarity set S- is empty (batch has a single class)");
    }
    const std::size_t B = static_cast<std::size_t>(bins_);
    h_pos_.assign(B, 0.0);
    h_neg_.assign(B, 0.0);
    // Extended-precision sums keep f bit-stable where the loss is locally
    // flat, which finite-difference checks rely on.
    const Acc wp = Acc{1} / static_cast<Acc>(n_pos_);
    const Acc wn = Acc{1} / static_cast<Acc>(n_neg_);
    for (const Pair& p : pairs_) {
      auto& h = p.positive ? h_pos_ : h_neg_;
      const Acc w = p.positive ? wp : wn;
      const Acc up = static_cast<Acc>(p.bin.upper_weight);
      h[p.bin.lower] += w * (Acc{1} - up);
      h[p.bin.lower + 1] += w * up;
    }
    cdf_pos_.assign(B, 0.0);
    tail_neg_.assign(B, 0.0);
    Acc acc = 0.0;
    Acc loss = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
      acc += h_pos_[r];
      cdf_pos_[r] = acc;
      loss += h_neg_[r] * acc;
    }
    acc = 0.0;
    for (std::size_t r = B; r-- > 0;) {
      acc += h_neg_[r];
      tail_neg_[r] = acc;
    }
    out = Tensor<T>::scalar(static_cast<T>(loss));
  }

  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&,
                const Tensor<T>& gout, std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const double g = static_cast<double>(gout[0]);
    const double inv_delta = 1.0 / bin_spacing(bins_);
    const double scale_pos = g * inv_delta / static_cast<double>(n_pos_);
    const double scale_neg = g * inv_delta / static_cast<double>(n_neg_);
    for (const Pair& p : pairs_) {
      const std::size_t r = p.bin.lower;
      // dL/dh_pos[q] = tail_neg[q]; dL/dh_neg[r] = cdf_pos[r]; the lower and
      // upper interpolation weights move by -1/delta and +1/delta.
      const double d =
          p.positive ? scale_pos * static_cast<double>(tail_neg_[r + 1] - tail_neg_[r])
                     : scale_neg * static_cast<double>(cdf_pos_[r + 1] - cdf_pos_[r]);
      (*gin[0])[p.flat] += static_cast<T>(d);
    }
  }

  std::uint64_t kink_signature() const override {
    std::uint64_t h = 0x51ed270b27a3c4e1ULL;
    for (const Pair& p : pairs_) h = mix_hash(h, p.bin.lower);
    return h;
  }

 private:
  struct Pair {
    std::size_t flat = 0;
    bool positive = false;
    BinPosition bin;
  };

  using Acc = long double;

  int bins_;
  std::vector<Pair> pairs_;
  std::size_t n_pos_ = 0;
  std::size_t n_neg_ = 0;
  std::vector<Acc> h_pos_, h_neg_, cdf_pos_, tail_neg_;
};

}  // namespace

template <typename T>
NodeId cosine_similarity_matrix(Graph<T>& g, NodeId normalized) {
  return ops::matmul(g, normalized, normalized, false, true);
}

template <typename T>
NodeId histogram_loss(Graph<T>& g, NodeId similarities, NodeId labels, int bins) {
  return g.template emplace<HistogramLossOp<T>>({similarities, labels}, bins);
}

template <typename T>
NodeId histogram_loss_on_embeddings(Graph<T>& g, NodeId embeddings, NodeId labels,
                                    int bins) {
  NodeId unit = ops::l2_normalize_rows(g, embeddings, T(1e-12));
  return histogram_loss(g, cosine_similarity_matrix(g, unit), labels, bins);
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& embeddings, T epsilon) {
  Graph<T> g;
  ops::l2_normalize_rows(g, g.leaf("x"), epsilon);
  g.bind("x", embeddings);
  return g.forward();
}

template <typename T>
Tensor<T> cosine_similarity_matrix(const Tensor<T>& normalized) {
  if (normalized.rank() != 2) {
    throw ShapeError("cosine_similarity_matrix: expects a matrix, got " +
                     shape_str(normalized.shape()));
  }
  const std::size_t n = normalized.dim(0), d = normalized.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      ss += static_cast<double>(normalized[i * d + j]) * normalized[i * d + j];
    }
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) {
      throw std::invalid_argument("cosine_similarity_matrix: row " + std::to_string(i) +
                                  " is not unit-normalized");
    }
  }
  Graph<T> g;
  auto x = g.leaf("x");
  cosine_similarity_matrix(g, x);
  g.bind("x", normalized);
  return g.forward();
}

double histogram_loss(const Tensor<double>& embeddings, std::span<const int> labels,
                      int bins) {
  Graph<double> g;
  histogram_loss_on_embeddings(g, g.leaf("x"), g.leaf("y"), bins);
  g.bind("x", embeddings);
  g.bind("y", Tensor<double>({labels.size()}, std::vector<double>(labels.begin(), labels.end())));
  return g.forward().item();
}

template NodeId cosine_similarity_matrix<float>(Graph<float>&, NodeId);
template NodeId cosine_similarity_matrix<double>(Graph<double>&, NodeId);
template NodeId histogram_loss<float>(Graph<float>&, NodeId, NodeId, int);
template NodeId histogram_loss<double>(Graph<double>&, NodeId, NodeId, int);
template NodeId histogram_loss_on_embeddings<float>(Graph<float>&, NodeId, NodeId, int);
template NodeId histogram_loss_on_embeddings<double>(Graph<double>&, NodeId, NodeId, int);
template Tensor<float> l2_normalize<float>(const Tensor<float>&, float);
template Tensor<double> l2_normalize<double>(const Tensor<double>&, double);
template Tensor<float> cosine_similarity_matrix<float>(const Tensor<float>&);
template Tensor<double> cosine_similarity_matrix<double>(const Tensor<double>&);

}  // namespace kitl::losses
