#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kitl/datapipe/datapipe.hpp"
#include "kitl/eval/eval.hpp"
#include "kitl/losses/losses.hpp"
#include "kitl/nn/model.hpp"

namespace kitl::protocols {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { baseline, weightadapt, histloss, protonet, adapthistloss, adaptprotonet };

Method parse_method(std::string_view name);
std::string_view method_name(Method method);
const std::vector<Method>& all_methods();

bool uses_source(Method m);      // all but baseline
bool adapts_target(Method m);    // baseline, weightadapt and the adapted embeddings
bool is_embedding(Method m);     // histloss, protonet and their adapted forms
bool is_histogram(Method m);
bool is_prototype(Method m);

// Source models are shared by methods that train the same way on the source.
std::string_view source_family(Method m);

enum class SourceMode { restricted, episodic };

std::string_view source_mode_name(SourceMode mode);
SourceMode parse_source_mode(std::string_view name);

struct ProtocolConfig {
  Method method = Method::histloss;
  nn::Arch arch = nn::Arch::mnist;
  float lr_source = 0.005f;
  float lr_adapt = 0.005f;
  std::size_t patience = 10;
  double adapt_tolerance = 1e-4;
  std::size_t adapt_window = 10;
  std::size_t max_adapt_epochs = 1000;
  // Upper bound on validation checks during source training.
  std::size_t max_source_checks = 1000;
  // Training steps between validation checks; 0 means once per epoch.
  std::size_t steps_per_check = 0;
  std::size_t batch_size = 64;
  // Adaptation runs full-batch when the support set has at most this many
  // instances, on balanced minibatches otherwise.
  std::size_t full_batch_limit = 512;
  std::size_t validation_episodes = 10;
  SourceMode mode = SourceMode::restricted;
  std::size_t episode_classes = 60;  // episodic mode only
  // Episodic mode: size of the source domain (0 keeps N_src = n).
  std::size_t source_classes = 0;
  std::size_t k_prime = 5;
  std::size_t source_query = 15;  // per class in a source episode, capped by tau - k'
  int bins = losses::kDefaultBins;
  std::size_t eval_chunk = 256;
};

// Learning rates and schedule defaults for a method on a named dataset.
ProtocolConfig default_config(Method method, std::string_view dataset);

struct SupportBank {
  Tensor<float> embeddings;  // unit rows
  std::vector<int> labels;
};

struct TrainedState {
  Method method = Method::histloss;
  nn::EmbeddingModel model;
  std::optional<nn::ClassifierHead> head;
  std::vector<int> head_classes;  // class id of each head column
  std::optional<losses::PrototypeSet<float>> prototypes;
  std::optional<SupportBank> support_bank;
};

struct Event {
  std::string phase;  // "source" or "adapt"
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> metric;
  std::string note;
};

using EventLog = std::vector<Event>;

std::string format_event(const Event& e);

struct RunContext {
  std::uint64_t base_seed = 0;
  std::size_t replication = 0;
  EventLog* log = nullptr;
};

TrainedState train_source(Method method, const data::Dataset& dataset,
                          const data::DomainSplit& split, const ProtocolConfig& config,
                          const RunContext& ctx);

// Baseline starts from a fresh model; the other methods continue from
// `state`. k = 1 with an adapted embedding is rejected.
TrainedState adapt_target(const TrainedState& state, Method method, const data::Dataset& dataset,
                          const data::ClassPartition& support, const ProtocolConfig& config,
                          const RunContext& ctx);

// Populates the prototypes or support bank that the classification rule of
// an embedding method needs, from the full support set.
void attach_support(TrainedState& state, const data::Dataset& dataset,
                    const data::ClassPartition& support, std::size_t chunk = 256);

// Predicted class ids; ties go to the lowest class id.
std::vector<int> classify(const TrainedState& state, const Tensor<float>& queries,
                          std::size_t chunk = 256);

// Embedding-method predictions from precomputed query embeddings.
std::vector<int> classify_embedded(const TrainedState& state, const Tensor<float>& query_embeddings);

struct SourceModel {
  TrainedState state;
  EventLog events;
};

// Thread-safe store of trained source models keyed by family and split. A
// key is trained once even when requested concurrently.
class SourceCache {
 public:
  std::shared_ptr<const SourceModel> get_or_train(const std::string& key,
                                                  const std::function<SourceModel()>& train);
  std::size_t size() const;

 private:
  struct Slot {
    std::once_flag once;
    std::shared_ptr<const SourceModel> model;
  };
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Slot>> slots_;
};

struct ReplicationOutput {
  eval::RunResult result;
  EventLog events;
  std::string manifest;  // split manifest the run consumed
  std::vector<int> predictions;  // per target query, in flatten(target_query) order
};

ReplicationOutput run_replication(const data::Dataset& dataset, const data::DatasetSpec& spec,
                                  Method method, std::size_t n, std::size_t k,
                                  std::size_t replication, std::uint64_t base_seed,
                                  const ProtocolConfig& config, SourceCache* cache = nullptr);

// Argmax per row, first maximum wins.
std::vector<std::size_t> argmax_rows(const Tensor<float>& scores);

}  // namespace kitl::protocols
