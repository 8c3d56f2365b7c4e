#include "kitl/protocols/protocols.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "kitl/numcore/ops.hpp"

namespace kitl::protocols {

using data::ClassPartition;
using data::Dataset;
using data::DomainSplit;
using data::Rng;
using data::stream_seed;

namespace {

struct MethodInfo {
  Method method;
  std::string_view name;
};

constexpr MethodInfo kMethods[] = {
    {Method::baseline, "baseline"},         {Method::weightadapt, "weightadapt"},
    {Method::histloss, "histloss"},         {Method::protonet, "protonet"},
    {Method::adapthistloss, "adapthistloss"}, {Method::adaptprotonet, "adaptprotonet"},
};

enum class Objective { softmax, histogram, proto };

Objective objective_of(Method m) {
  if (is_histogram(m)) return Objective::histogram;
  if (is_prototype(m)) return Objective::proto;
  return Objective::softmax;
}

Tensor<float> float_labels(std::span<const int> labels) {
  Tensor<float> t({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<float>(labels[i]);
  return t;
}

std::map<int, int> dense_index(std::span<const int> classes) {
  std::map<int, int> out;
  for (int c : classes) out.emplace(c, static_cast<int>(out.size()));
  return out;
}

std::vector<int> class_ids(const ClassPartition& p) {
  std::vector<int> ids;
  for (const auto& [c, idx] : p) ids.push_back(c);
  return ids;
}

void log_event(const RunContext& ctx, Event e) {
  if (ctx.log) ctx.log->push_back(std::move(e));
}

// One training batch: rows of `x` with labels. For prototype episodes the
// first `support` rows are the support set and the rest the queries.
struct Batch {
  Tensor<float> x;
  std::vector<int> labels;
  std::size_t support = 0;
};

Batch labelled_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  return {ds.gather(indices), ds.gather_labels(indices), 0};
}

Batch episode_batch(const Dataset& ds, std::span<const std::size_t> support,
                    std::span<const std::size_t> query) {
  std::vector<std::size_t> all(support.begin(), support.end());
  all.insert(all.end(), query.begin(), query.end());
  return {ds.gather(all), ds.gather_labels(all), support.size()};
}

// Owns the training graph of one objective over a model (and head) that it
// updates in place with Adam.
class Trainer {
 public:
  Trainer(Objective objective, nn::EmbeddingModel& model, nn::ClassifierHead* head,
          std::vector<int> head_classes, float lr, int bins)
      : objective_(objective),
        model_(model),
        head_(head),
        dense_(dense_index(head_classes)),
        model_opt_(model.params(), lr) {
    const NodeId x = g_.leaf("x");
    nodes_ = model_.build(g_, x, nn::Mode::train);
    const NodeId y = g_.leaf("y");
    switch (objective_) {
      case Objective::softmax: {
        if (!head_) throw ProtocolError("softmax training needs a classifier head");
        head_opt_ = nn::AdamState(head_params(), lr);
        losses::softmax_xent(g_, head_->build(g_, nodes_.embedding), y);
        break;
      }
      case Objective::histogram:
        losses::histogram_loss_on_embeddings(g_, nodes_.embedding, y, bins);
        break;
      case Objective::proto: {
        const NodeId sidx = g_.leaf("support_rows");
        const NodeId qidx = g_.leaf("query_rows");
        const NodeId qy = g_.leaf("query_y");
        const NodeId support = ops::select_rows(g_, nodes_.embedding, sidx);
        const NodeId queries = ops::select_rows(g_, nodes_.embedding, qidx);
        losses::proto_loss(g_, queries, qy, losses::class_means(g_, support, y));
        break;
      }
    }
    for (const auto& [name, p] : model_.params()) wrt_.insert(name);
    if (objective_ == Objective::softmax) {
      wrt_.insert(std::string(nn::ClassifierHead::kWeightName));
      wrt_.insert(std::string(nn::ClassifierHead::kBiasName));
    }
  }

  // Loss at the current parameters.
  double forward(const Batch& b) {
    g_.bind("x", b.x);
    switch (objective_) {
      case Objective::softmax: {
        std::vector<int> local(b.labels.size());
        for (std::size_t i = 0; i < local.size(); ++i) local[i] = dense_.at(b.labels[i]);
        g_.bind("y", float_labels(local));
        break;
      }
      case Objective::histogram:
        g_.bind("y", float_labels(b.labels));
        break;
      case Objective::proto: {
        const std::span<const int> sl(b.labels.data(), b.support);
        const std::span<const int> ql(b.labels.data() + b.support, b.labels.size() - b.support);
        std::vector<int> cls(sl.begin(), sl.end());
        std::sort(cls.begin(), cls.end());
        cls.erase(std::unique(cls.begin(), cls.end()), cls.end());
        const auto dense = dense_index(cls);
        std::vector<int> sy, qy;
        for (int c : sl) sy.push_back(dense.at(c));
        for (int c : ql) {
          auto it = dense.find(c);
          if (it == dense.end()) throw ProtocolError("episode query class has no support");
          qy.push_back(it->second);
        }
        Tensor<float> srows({b.support}), qrows({ql.size()});
        for (std::size_t i = 0; i < b.support; ++i) srows[i] = static_cast<float>(i);
        for (std::size_t i = 0; i < ql.size(); ++i) qrows[i] = static_cast<float>(b.support + i);
        g_.bind("y", float_labels(sy));
        g_.bind("query_y", float_labels(qy));
        g_.bind("support_rows", std::move(srows));
        g_.bind("query_rows", std::move(qrows));
        break;
      }
    }
    model_.bind(g_);
    if (head_) head_->bind(g_);
    return g_.forward().item();
  }

  // Adam step from the gradients of the last forward pass, then running
  // batchnorm statistics.
  void update() {
    auto grads = g_.backward(wrt_);
    if (head_) {
      nn::ParamMap hp = head_params();
      nn::adam_step(head_opt_, hp, grads);
      head_->weight = std::move(hp.at(std::string(nn::ClassifierHead::kWeightName)));
      head_->bias = std::move(hp.at(std::string(nn::ClassifierHead::kBiasName)));
    }
    nn::adam_step(model_opt_, model_.params(), grads);
    model_.absorb_batch_stats(g_, nodes_);
  }

  double step(const Batch& b) {
    const double loss = forward(b);
    update();
    return loss;
  }

 private:
  nn::ParamMap head_params() const {
    nn::ParamMap hp;
    hp.emplace(std::string(nn::ClassifierHead::kWeightName), head_->weight);
    hp.emplace(std::string(nn::ClassifierHead::kBiasName), head_->bias);
    return hp;
  }

  Objective objective_;
  nn::EmbeddingModel& model_;
  nn::ClassifierHead* head_;
  std::map<int, int> dense_;
  Graph<float> g_;
  nn::EmbedNodes nodes_;
  nn::AdamState model_opt_;
  nn::AdamState head_opt_;
  std::set<std::string> wrt_;
};

std::size_t episode_query(const ProtocolConfig& cfg, const DomainSplit& split) {
  std::size_t smallest = std::numeric_limits<std::size_t>::max();
  for (const auto& [c, idx] : split.source_train) smallest = std::min(smallest, idx.size());
  if (smallest <= cfg.k_prime) {
    throw ProtocolError("source classes hold " + std::to_string(smallest) +
                        " training instances, episodes need more than k' = " +
                        std::to_string(cfg.k_prime));
  }
  return std::min(cfg.source_query, smallest - cfg.k_prime);
}

std::size_t episode_ways(const ProtocolConfig& cfg, std::size_t available) {
  return cfg.mode == SourceMode::restricted ? available : std::min(cfg.episode_classes, available);
}

// Accuracy of an embedding method's own rule on sampled episodes over the
// source validation set.
double validation_episodes(const TrainedState& state, const Dataset& ds,
                           const ClassPartition& valid, const ProtocolConfig& cfg,
                           const RunContext& ctx, std::size_t check) {
  const std::vector<std::size_t> rows = data::flatten(valid);
  const Tensor<float> emb = nn::embed(state.model, ds.gather(rows), nn::Mode::eval, cfg.eval_chunk);
  std::map<std::size_t, std::size_t> row_of;
  for (std::size_t i = 0; i < rows.size(); ++i) row_of[rows[i]] = i;
  std::size_t smallest = std::numeric_limits<std::size_t>::max();
  for (const auto& [c, idx] : valid) smallest = std::min(smallest, idx.size());
  if (smallest < 2) throw ProtocolError("validation classes need at least 2 instances");
  const std::size_t kv = std::min(cfg.k_prime, (smallest + 1) / 2);
  const std::size_t qv = std::min<std::size_t>(15, smallest - kv);
  const std::size_t ways = episode_ways(cfg, valid.size());
  const std::size_t width = emb.dim(1);
  Rng rng(stream_seed(ctx.base_seed, ctx.replication, "valid-episodes", check));
  double total = 0.0;
  for (std::size_t e = 0; e < cfg.validation_episodes; ++e) {
    const data::Episode ep = data::sample_episode(valid, ways, kv, qv, rng);
    auto take = [&](const std::vector<std::size_t>& idx) {
      Tensor<float> out({idx.size(), width});
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t r = row_of.at(idx[i]);
        std::copy(emb.ptr() + r * width, emb.ptr() + (r + 1) * width, out.ptr() + i * width);
      }
      return out;
    };
    TrainedState probe;
    probe.method = state.method;
    const Tensor<float> support = take(ep.support);
    const std::vector<int> support_labels = ds.gather_labels(ep.support);
    if (is_histogram(state.method)) {
      probe.support_bank = SupportBank{losses::l2_normalize(support), support_labels};
    } else {
      probe.prototypes = losses::compute_prototypes(support, support_labels);
    }
    const auto predicted = classify_embedded(probe, take(ep.query));
    total += eval::accuracy(predicted, ds.gather_labels(ep.query));
  }
  return total / static_cast<double>(cfg.validation_episodes);
}

double validation_classification(const TrainedState& state, const Tensor<float>& x,
                                 const std::vector<int>& labels, const ProtocolConfig& cfg) {
  return eval::accuracy(classify(state, x, cfg.eval_chunk), labels);
}

// Minibatch schedule of the source domain. Batches are drawn from per-epoch
// seeded streams shared by every method of a replication.
class SourceBatches {
 public:
  SourceBatches(Objective objective, const Dataset& ds, const DomainSplit& split,
                const ProtocolConfig& cfg, const RunContext& ctx)
      : objective_(objective), ds_(ds), split_(split), cfg_(cfg), ctx_(ctx) {
    if (objective_ == Objective::proto) {
      query_ = episode_query(cfg, split);
      ways_ = episode_ways(cfg, split.source_train.size());
      const std::size_t per_episode = ways_ * (cfg.k_prime + query_);
      const std::size_t total = data::flatten(split.source_train).size();
      episodes_per_epoch_ = std::max<std::size_t>(1, (total + per_episode - 1) / per_episode);
    }
  }

  std::size_t epoch_length() {
    if (objective_ == Objective::proto) return episodes_per_epoch_;
    refill_if_needed();
    return batches_.size();
  }

  Batch next() {
    if (objective_ == Objective::proto) {
      if (!episode_rng_) {
        episode_rng_.emplace(stream_seed(ctx_.base_seed, ctx_.replication, "source-episodes", 0));
      }
      const data::Episode ep = data::sample_source_episode(split_, ways_, cfg_.k_prime, query_, *episode_rng_);
      return episode_batch(ds_, ep.support, ep.query);
    }
    refill_if_needed();
    Batch b = labelled_batch(ds_, batches_[cursor_++]);
    return b;
  }

 private:
  void refill_if_needed() {
    if (cursor_ < batches_.size()) return;
    Rng rng(stream_seed(ctx_.base_seed, ctx_.replication, "source-batches", epoch_++));
    batches_ = data::balanced_minibatches(split_.source_train, cfg_.batch_size, rng);
    cursor_ = 0;
  }

  Objective objective_;
  const Dataset& ds_;
  const DomainSplit& split_;
  const ProtocolConfig& cfg_;
  const RunContext& ctx_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::size_t query_ = 0;
  std::size_t ways_ = 0;
  std::size_t episodes_per_epoch_ = 1;
  std::optional<Rng> episode_rng_;
};

}  // namespace

Method parse_method(std::string_view name) {
  for (const auto& m : kMethods) {
    if (m.name == name) return m.method;
  }
  throw ProtocolError("unknown method '" + std::string(name) +
                      "' (expected baseline, weightadapt, histloss, protonet, adapthistloss or "
                      "adaptprotonet)");
}

std::string_view method_name(Method method) {
  for (const auto& m : kMethods) {
    if (m.method == method) return m.name;
  }
  throw ProtocolError("unknown method");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = {Method::baseline,      Method::weightadapt,
                                              Method::histloss,      Method::protonet,
                                              Method::adapthistloss, Method::adaptprotonet};
  return methods;
}

bool uses_source(Method m) { return m != Method::baseline; }

bool adapts_target(Method m) {
  return m == Method::baseline || m == Method::weightadapt || m == Method::adapthistloss ||
         m == Method::adaptprotonet;
}

bool is_histogram(Method m) { return m == Method::histloss || m == Method::adapthistloss; }
bool is_prototype(Method m) { return m == Method::protonet || m == Method::adaptprotonet; }
bool is_embedding(Method m) { return is_histogram(m) || is_prototype(m); }

std::string_view source_family(Method m) {
  if (is_histogram(m)) return "histogram";
  if (is_prototype(m)) return "prototype";
  if (m == Method::weightadapt) return "softmax";
  throw ProtocolError("baseline has no source model");
}

std::string_view source_mode_name(SourceMode mode) {
  return mode == SourceMode::restricted ? "restricted_source" : "episodic";
}

SourceMode parse_source_mode(std::string_view name) {
  if (name == "restricted_source" || name == "restricted") return SourceMode::restricted;
  if (name == "episodic") return SourceMode::episodic;
  throw ProtocolError("unknown source mode '" + std::string(name) +
                      "' (expected restricted_source or episodic)");
}

ProtocolConfig default_config(Method method, std::string_view dataset) {
  const data::DatasetSpec& spec = data::dataset_spec(dataset);
  ProtocolConfig cfg;
  cfg.method = method;
  cfg.arch = nn::parse_arch(spec.name);
  float lr = 0.005f;
  if (is_prototype(method)) lr = dataset == "mnist" ? 0.001f : 0.0001f;
  cfg.lr_source = lr;
  cfg.lr_adapt = lr;
  cfg.k_prime = spec.k_prime;
  cfg.batch_size = dataset == "tinyimagenet" ? 32 : 64;
  // 64x64x3 activations for a 256-row chunk need over a gigabyte.
  cfg.eval_chunk = dataset == "tinyimagenet" ? 32 : 256;
  cfg.steps_per_check = (dataset == "omniglot" || dataset == "tinyimagenet") ? 50 : 0;
  return cfg;
}

std::string format_event(const Event& e) {
  std::ostringstream out;
  out.precision(10);
  out << e.phase << " step=" << e.step << " loss=" << e.loss;
  if (e.metric) out << " metric=" << *e.metric;
  if (!e.note.empty()) out << " note=" << e.note;
  return out.str();
}

TrainedState train_source(Method method, const Dataset& ds, const DomainSplit& split,
                          const ProtocolConfig& cfg, const RunContext& ctx) {
  if (!uses_source(method)) {
    throw ProtocolError("baseline ignores the source domain; train_source does not apply");
  }
  if (split.source_train.empty() || data::flatten(split.source_train).empty()) {
    throw ProtocolError("empty source training split");
  }
  if (split.source_valid.empty() || data::flatten(split.source_valid).empty()) {
    throw ProtocolError("empty source validation split");
  }
  const Objective objective = objective_of(method);
  TrainedState state;
  state.method = method;
  state.model = nn::build_architecture(cfg.arch, stream_seed(ctx.base_seed, ctx.replication, "init-source"));
  if (objective == Objective::softmax) {
    state.head = nn::make_head(state.model.embed_dim(), split.source_classes.size(),
                               stream_seed(ctx.base_seed, ctx.replication, "source-head"));
    state.head_classes = split.source_classes;
  }

  Tensor<float> valid_x;
  std::vector<int> valid_y;
  if (objective == Objective::softmax) {
    const auto rows = data::flatten(split.source_valid);
    valid_x = ds.gather(rows);
    valid_y = ds.gather_labels(rows);
  }

  Trainer trainer(objective, state.model, state.head ? &*state.head : nullptr, state.head_classes,
                  cfg.lr_source, cfg.bins);
  SourceBatches batches(objective, ds, split, cfg, ctx);

  TrainedState best = state;
  double best_metric = -1.0;
  std::size_t since_best = 0;
  std::size_t step = 0;
  for (std::size_t check = 0; check < cfg.max_source_checks; ++check) {
    const std::size_t steps = cfg.steps_per_check ? cfg.steps_per_check : batches.epoch_length();
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s, ++step) loss_sum += trainer.step(batches.next());
    const double metric = objective == Objective::softmax
                              ? validation_classification(state, valid_x, valid_y, cfg)
                              : validation_episodes(state, ds, split.source_valid, cfg, ctx, check);
    log_event(ctx, {"source", step, loss_sum / static_cast<double>(steps), metric, ""});
    if (metric > best_metric) {
      best_metric = metric;
      best = state;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      log_event(ctx, {"source", step, 0.0, best_metric, "early-stop"});
      break;
    }
    if (check + 1 == cfg.max_source_checks) {
      log_event(ctx, {"source", step, 0.0, best_metric, "check-cap"});
    }
  }
  return best;
}

TrainedState adapt_target(const TrainedState& state, Method method, const Dataset& ds,
                          const ClassPartition& support, const ProtocolConfig& cfg,
                          const RunContext& ctx) {
  if (!adapts_target(method)) {
    throw ProtocolError(std::string(method_name(method)) + " does not adapt to the target domain");
  }
  if (support.empty()) throw ProtocolError("empty target support set");
  std::size_t k = support.begin()->second.size();
  for (const auto& [c, idx] : support) {
    if (idx.size() != k) throw ProtocolError("target support classes must all hold k instances");
  }
  if (is_embedding(method) && k < 2) {
    throw ProtocolError(std::string(method_name(method)) +
                        " is unsupported at k = 1: a single labelled instance per class cannot "
                        "adapt the embedding");
  }
  const std::vector<int> classes = class_ids(support);
  const Objective objective = objective_of(method);

  TrainedState out;
  out.method = method;
  if (method == Method::baseline) {
    out.model = nn::build_architecture(cfg.arch,
                                       stream_seed(ctx.base_seed, ctx.replication, "init-target"));
  } else {
    if (state.method != method && source_family(state.method) != source_family(method)) {
      throw ProtocolError("source state of " + std::string(method_name(state.method)) +
                          " cannot seed " + std::string(method_name(method)));
    }
    out.model = state.model;
  }
  if (objective == Objective::softmax) {
    // Fresh target head; WeightAdapt transfers the trunk only.
    out.head = nn::make_head(out.model.embed_dim(), classes.size(),
                             stream_seed(ctx.base_seed, ctx.replication, "target-head"));
    out.head_classes = classes;
  }

  Trainer trainer(objective, out.model, out.head ? &*out.head : nullptr, out.head_classes,
                  cfg.lr_adapt, cfg.bins);
  const std::size_t total = k * classes.size();
  std::vector<double> losses;
  std::string stop = "epoch-cap";
  for (std::size_t epoch = 0; epoch < cfg.max_adapt_epochs; ++epoch) {
    std::vector<Batch> epoch_batches;
    if (objective == Objective::proto) {
      // Subsample large support sets, then split into adaptation support and
      // query halves afresh each epoch.
      const std::size_t per_class =
          std::min(k, std::max<std::size_t>(2, cfg.full_batch_limit / classes.size()));
      ClassPartition subset = support;
      if (per_class < k) {
        Rng rng(stream_seed(ctx.base_seed, ctx.replication, "adapt-subset", epoch));
        for (auto& [c, idx] : subset) {
          for (std::size_t i = 0; i < per_class; ++i) {
            std::swap(idx[i], idx[i + static_cast<std::size_t>(rng() % (idx.size() - i))]);
          }
          idx.resize(per_class);
        }
      }
      const auto halves = data::split_support_for_adaptation(
          subset, per_class, stream_seed(ctx.base_seed, ctx.replication, "adapt-split", epoch));
      epoch_batches.push_back(episode_batch(ds, data::flatten(halves.support), data::flatten(halves.query)));
    } else if (total <= cfg.full_batch_limit) {
      epoch_batches.push_back(labelled_batch(ds, data::flatten(support)));
    } else {
      Rng rng(stream_seed(ctx.base_seed, ctx.replication, "adapt-batches", epoch));
      for (const auto& b : data::balanced_minibatches(support, cfg.batch_size, rng)) {
        epoch_batches.push_back(labelled_batch(ds, b));
      }
    }

    double loss_sum = 0.0;
    bool at_zero = false;
    for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
      const double loss = trainer.forward(epoch_batches[b]);
      loss_sum += loss;
      if (epoch_batches.size() == 1 && loss == 0.0) {
        at_zero = true;
        break;
      }
      trainer.update();
    }
    const double mean_loss = loss_sum / static_cast<double>(epoch_batches.size());
    losses.push_back(mean_loss);
    log_event(ctx, {"adapt", epoch, mean_loss, std::nullopt, ""});
    if (at_zero) {
      stop = "zero-loss";
      break;
    }
    const std::size_t w = cfg.adapt_window;
    if (w > 0 && losses.size() >= 2 * w) {
      const auto end = losses.end();
      const double prev = std::accumulate(end - 2 * w, end - w, 0.0) / static_cast<double>(w);
      const double cur = std::accumulate(end - w, end, 0.0) / static_cast<double>(w);
      if (prev <= 0.0 || (prev - cur) / prev < cfg.adapt_tolerance) {
        stop = "asymptote";
        break;
      }
    }
  }
  log_event(ctx, {"adapt", losses.size(), losses.empty() ? 0.0 : losses.back(), std::nullopt, stop});
  return out;
}

void attach_support(TrainedState& state, const Dataset& ds, const ClassPartition& support,
                    std::size_t chunk) {
  if (!is_embedding(state.method)) return;
  const auto rows = data::flatten(support);
  if (rows.empty()) throw ProtocolError("embedding methods classify against a non-empty support set");
  const Tensor<float> emb = nn::embed(state.model, ds.gather(rows), nn::Mode::eval, chunk);
  const std::vector<int> labels = ds.gather_labels(rows);
  if (is_histogram(state.method)) {
    state.support_bank = SupportBank{losses::l2_normalize(emb), labels};
  } else {
    state.prototypes = losses::compute_prototypes(emb, labels);
  }
}

std::vector<std::size_t> argmax_rows(const Tensor<float>& scores) {
  if (scores.rank() != 2 || scores.dim(1) == 0) {
    throw ShapeError("argmax_rows: expected a non-empty matrix, got " + shape_str(scores.shape()));
  }
  std::vector<std::size_t> out(scores.dim(0));
  const std::size_t w = scores.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float* row = scores.ptr() + i * w;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + w) - row);
  }
  return out;
}

std::vector<int> classify_embedded(const TrainedState& state, const Tensor<float>& queries) {
  if (is_histogram(state.method)) {
    if (!state.support_bank) throw ProtocolError("histogram classification needs a support bank");
    const SupportBank& bank = *state.support_bank;
    const Tensor<float> q = losses::l2_normalize(queries);
    const std::size_t d = q.dim(1);
    if (bank.embeddings.dim(1) != d) throw ShapeError("classify: embedding widths differ");
    std::vector<int> out(q.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float* qi = q.ptr() + i * d;
      double best = -std::numeric_limits<double>::infinity();
      int best_label = 0;
      for (std::size_t j = 0; j < bank.labels.size(); ++j) {
        const float* sj = bank.embeddings.ptr() + j * d;
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += static_cast<double>(qi[t]) * sj[t];
        if (s > best || (s == best && bank.labels[j] < best_label)) {
          best = s;
          best_label = bank.labels[j];
        }
      }
      out[i] = best_label;
    }
    return out;
  }
  if (is_prototype(state.method)) {
    if (!state.prototypes) throw ProtocolError("prototype classification needs prototypes");
    const auto winners = argmax_rows(losses::proto_log_probs(queries, *state.prototypes));
    std::vector<int> out(winners.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = state.prototypes->classes[winners[i]];
    return out;
  }
  throw ProtocolError(std::string(method_name(state.method)) + " classifies with its head");
}

std::vector<int> classify(const TrainedState& state, const Tensor<float>& queries, std::size_t chunk) {
  if (is_embedding(state.method)) {
    return classify_embedded(state, nn::embed(state.model, queries, nn::Mode::eval, chunk));
  }
  if (!state.head) throw ProtocolError("classification by head needs a trained head");
  const auto winners = argmax_rows(nn::classify_logits(state.model, *state.head, queries, chunk));
  std::vector<int> out(winners.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = state.head_classes.at(winners[i]);
  return out;
}

std::shared_ptr<const SourceModel> SourceCache::get_or_train(
    const std::string& key, const std::function<SourceModel()>& train) {
  std::shared_ptr<Slot> slot;
  {
    std::lock_guard lock(mutex_);
    auto& s = slots_[key];
    if (!s) s = std::make_shared<Slot>();
    slot = s;
  }
  std::call_once(slot->once, [&] { slot->model = std::make_shared<const SourceModel>(train()); });
  return slot->model;
}

std::size_t SourceCache::size() const {
  std::lock_guard lock(mutex_);
  return slots_.size();
}

ReplicationOutput run_replication(const Dataset& ds, const data::DatasetSpec& spec, Method method,
                                  std::size_t n, std::size_t k, std::size_t replication,
                                  std::uint64_t base_seed, const ProtocolConfig& cfg,
                                  SourceCache* cache) {
  const auto t0 = std::chrono::steady_clock::now();
  if (std::find(spec.n_values.begin(), spec.n_values.end(), n) == spec.n_values.end() ||
      std::find(spec.k_values.begin(), spec.k_values.end(), k) == spec.k_values.end()) {
    throw ProtocolError(spec.name + ": (n=" + std::to_string(n) + ", k=" + std::to_string(k) +
                        ") is not a configured condition");
  }
  data::SplitConfig split_cfg = data::split_config_for(spec, n, k, replication, base_seed);
  if (cfg.mode == SourceMode::episodic && cfg.source_classes > 0) {
    split_cfg.n_source = cfg.source_classes;
  }
  const DomainSplit split = data::make_domain_split(ds, split_cfg);

  ReplicationOutput output;
  output.manifest = data::split_manifest(split);
  RunContext ctx{base_seed, replication, &output.events};

  TrainedState state;
  state.method = method;
  if (uses_source(method)) {
    std::ostringstream key;
    key << ds.name << '/' << source_family(method) << "/n" << n << "/r" << replication << "/s"
        << base_seed << "/lr" << cfg.lr_source << "/c" << cfg.max_source_checks << '/'
        << cfg.steps_per_check << '/' << cfg.patience << '/' << cfg.batch_size << '/'
        << source_mode_name(cfg.mode) << '/' << cfg.k_prime << '/' << cfg.source_query << '/'
        << cfg.episode_classes << '/' << cfg.source_classes << '/' << cfg.validation_episodes;
    auto train = [&] {
      SourceModel m;
      RunContext source_ctx{base_seed, replication, &m.events};
      m.state = train_source(method, ds, split, cfg, source_ctx);
      return m;
    };
    std::shared_ptr<const SourceModel> source;
    if (cache) {
      source = cache->get_or_train(key.str(), train);
    } else {
      source = std::make_shared<const SourceModel>(train());
    }
    output.events = source->events;
    state = source->state;
    state.method = method;
  }
  if (adapts_target(method)) {
    if (is_embedding(method) && k < 2) {
      log_event(ctx, {"adapt", 0, 0.0, std::nullopt, "k=1 uses the non-adapted embedding"});
    } else {
      state = adapt_target(state, method, ds, split.target_support, cfg, ctx);
    }
  }
  attach_support(state, ds, split.target_support, cfg.eval_chunk);

  const auto query_rows = data::flatten(split.target_query);
  const auto predicted = classify(state, ds.gather(query_rows), cfg.eval_chunk);
  const auto truth = ds.gather_labels(query_rows);

  eval::RunResult& r = output.result;
  r.dataset = spec.name;
  r.method = std::string(method_name(method));
  r.n = n;
  r.k = k;
  r.replication = replication;
  r.accuracy = eval::accuracy(predicted, truth);
  r.num_queries = truth.size();
  output.predictions = predicted;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return output;
}

}  // namespace kitl::protocols
