#include "kitl/eval/episodic.hpp"

#include <limits>

namespace kitl::eval {

ConditionSummary episodic_evaluate(const protocols::TrainedState& state, const data::Dataset& ds,
                                   const data::ClassPartition& pool, const EpisodicOptions& opt,
                                   data::Rng& rng) {
  using protocols::Method;
  if (state.method != Method::histloss && state.method != Method::protonet) {
    throw EvalError("episodic evaluation covers histloss and protonet, not " +
                    std::string(protocols::method_name(state.method)));
  }
  if (opt.episodes == 0 || opt.k == 0 || opt.n_way == 0) {
    throw EvalError("episodic evaluation needs episodes, k and n_way >= 1");
  }
  if (pool.size() < opt.n_way) {
    throw EvalError("pool of " + std::to_string(pool.size()) + " classes cannot supply " +
                    std::to_string(opt.n_way) + "-way episodes");
  }
  std::size_t smallest = std::numeric_limits<std::size_t>::max();
  for (const auto& [c, idx] : pool) smallest = std::min(smallest, idx.size());
  if (smallest < opt.k + 1) {
    throw EvalError("pool classes need k + 1 = " + std::to_string(opt.k + 1) +
                    " instances, smallest has " + std::to_string(smallest));
  }
  const std::size_t q = std::min(smallest - opt.k, opt.query_cap.value_or(smallest - opt.k));

  const auto rows = data::flatten(pool);
  const Tensor<float> emb = nn::embed(state.model, ds.gather(rows), nn::Mode::eval, opt.chunk);
  std::map<std::size_t, std::size_t> row_of;
  for (std::size_t i = 0; i < rows.size(); ++i) row_of[rows[i]] = i;
  const std::size_t d = emb.dim(1);
  auto take = [&](const std::vector<std::size_t>& idx) {
    Tensor<float> out({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t r = row_of.at(idx[i]);
      std::copy(emb.ptr() + r * d, emb.ptr() + (r + 1) * d, out.ptr() + i * d);
    }
    return out;
  };

  std::vector<double> accuracies;
  accuracies.reserve(opt.episodes);
  for (std::size_t e = 0; e < opt.episodes; ++e) {
    const data::Episode ep = data::sample_episode(pool, opt.n_way, opt.k, q, rng);
    protocols::TrainedState probe;
    probe.method = state.method;
    const Tensor<float> support = take(ep.support);
    const auto labels = ds.gather_labels(ep.support);
    if (state.method == Method::histloss) {
      probe.support_bank = protocols::SupportBank{losses::l2_normalize(support), labels};
    } else {
      probe.prototypes = losses::compute_prototypes(support, labels);
    }
    accuracies.push_back(accuracy(protocols::classify_embedded(probe, take(ep.query)),
                                  ds.gather_labels(ep.query)));
  }
  return summarize_values(accuracies);
}

}  // namespace kitl::eval
