#pragma once

#include <optional>

#include "kitl/eval/eval.hpp"
#include "kitl/protocols/protocols.hpp"

namespace kitl::eval {

struct EpisodicOptions {
  std::size_t k = 1;
  std::size_t n_way = 5;
  std::size_t episodes = 1000;
  // Queries per class; the rest of each sampled class when absent.
  std::optional<std::size_t> query_cap;
  std::size_t chunk = 256;
};

// Mean accuracy and its standard error over sampled n-way k-shot episodes of
// `pool`, classified with the rule of a non-adapted embedding method. The
// pool is embedded once.
ConditionSummary episodic_evaluate(const protocols::TrainedState& state, const data::Dataset& dataset,
                                   const data::ClassPartition& pool, const EpisodicOptions& options,
                                   data::Rng& rng);

}  // namespace kitl::eval
