#include "kitl/nn/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "kitl/numcore/ops.hpp"

namespace kitl::nn {
namespace {

enum class Kind { conv, batch_norm, relu, pool, flatten, dense };

struct Layer {
  Kind kind;
  std::string name;
  std::size_t in = 0;   // input channels (conv) or features (dense)
  std::size_t out = 0;
};

constexpr std::size_t kFilters = 32;
constexpr std::size_t kKernel = 3;

std::vector<Layer> layers(Arch arch) {
  auto conv = [](int i, std::size_t in) {
    return Layer{Kind::conv, "conv" + std::to_string(i), in, kFilters};
  };
  auto bn = [](int i) { return Layer{Kind::batch_norm, "bn" + std::to_string(i), kFilters, kFilters}; };
  const Layer relu{Kind::relu, "", 0, 0};
  const Layer pool{Kind::pool, "", 0, 0};
  const Layer flat{Kind::flatten, "", 0, 0};
  switch (arch) {
    case Arch::mnist:
      return {conv(1, 1), relu, conv(2, kFilters), relu, pool, flat,
              Layer{Kind::dense, "fc", 14 * 14 * kFilters, 128}};
    case Arch::isolet:
      return {Layer{Kind::dense, "fc1", 617, 128}, relu, Layer{Kind::dense, "fc2", 128, 64}};
    case Arch::omniglot:
      return {conv(1, 1),        bn(1), relu, pool, conv(2, kFilters), bn(2), relu, pool,
              conv(3, kFilters), bn(3), relu, flat,
              Layer{Kind::dense, "fc", 7 * 7 * kFilters, 128}};
    case Arch::tinyimagenet:
      return {conv(1, 3),        bn(1), relu, pool, conv(2, kFilters), bn(2), relu, pool,
              conv(3, kFilters), bn(3), relu, pool, conv(4, kFilters), bn(4), relu, flat,
              Layer{Kind::dense, "fc", 8 * 8 * kFilters, 128}};
  }
  throw std::logic_error("unhandled architecture");
}

void fill_truncated_normal(Tensor<float>& t, std::size_t fan_in, std::mt19937_64& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (float& v : t.data()) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = static_cast<float>(z * stddev);
  }
}

template <typename T>
Tensor<T> cast_tensor(const Tensor<float>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<T>();
  }
}

template <typename T>
void bind_present(Graph<T>& g, const ParamMap& values) {
  for (const auto& [name, value] : values) {
    if (g.has_leaf(name)) g.bind(name, cast_tensor<T>(value));
  }
}

}  // namespace

Arch parse_arch(std::string_view name) {
  if (name == "mnist") return Arch::mnist;
  if (name == "isolet") return Arch::isolet;
  if (name == "omniglot") return Arch::omniglot;
  if (name == "tinyimagenet") return Arch::tinyimagenet;
  throw std::invalid_argument("unknown architecture '" + std::string(name) +
                              "' (expected mnist, isolet, omniglot or tinyimagenet)");
}

std::string_view arch_name(Arch arch) {
  switch (arch) {
    case Arch::mnist: return "mnist";
    case Arch::isolet: return "isolet";
    case Arch::omniglot: return "omniglot";
    case Arch::tinyimagenet: return "tinyimagenet";
  }
  throw std::logic_error("unhandled architecture");
}

Shape input_shape(Arch arch) {
  switch (arch) {
    case Arch::mnist:
    case Arch::omniglot: return {28, 28, 1};
    case Arch::isolet: return {617};
    case Arch::tinyimagenet: return {64, 64, 3};
  }
  throw std::logic_error("unhandled architecture");
}

std::size_t embed_dim(Arch arch) { return arch == Arch::isolet ? 64 : 128; }

EmbeddingModel::EmbeddingModel(Arch arch, ParamMap params, ParamMap buffers)
    : arch_(arch), params_(std::move(params)), buffers_(std::move(buffers)) {
  for (const Layer& layer : layers(arch)) {
    auto require = [&](const ParamMap& map, const std::string& key, const Shape& shape) {
      auto it = map.find(key);
      if (it == map.end()) {
        throw ShapeError(std::string(arch_name(arch)) + ": missing tensor '" + key + "'");
      }
      if (it->second.shape() != shape) {
        throw ShapeError(std::string(arch_name(arch)) + ": tensor '" + key + "' has shape " +
                         shape_str(it->second.shape()) + ", expected " + shape_str(shape));
      }
    };
    switch (layer.kind) {
      case Kind::conv:
        require(params_, layer.name + ".weight", {kKernel, kKernel, layer.in, layer.out});
        require(params_, layer.name + ".bias", {layer.out});
        break;
      case Kind::dense:
        require(params_, layer.name + ".weight", {layer.in, layer.out});
        require(params_, layer.name + ".bias", {layer.out});
        break;
      case Kind::batch_norm:
        require(params_, layer.name + ".gamma", {layer.out});
        require(params_, layer.name + ".beta", {layer.out});
        require(buffers_, layer.name + ".running_mean", {layer.out});
        require(buffers_, layer.name + ".running_var", {layer.out});
        break;
      default:
        break;
    }
  }
}

std::size_t EmbeddingModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) total += t.size();
  return total;
}

std::vector<std::string> EmbeddingModel::batch_norm_absorbed_params() const {
  std::vector<std::string> names;
  const auto spec = layers(arch_);
  for (std::size_t i = 0; i + 1 < spec.size(); ++i) {
    if (spec[i].kind == Kind::conv && spec[i + 1].kind == Kind::batch_norm) {
      names.push_back(spec[i].name + ".bias");
    }
  }
  return names;
}

template <typename T>
EmbedNodes EmbeddingModel::build(Graph<T>& g, NodeId input, Mode mode) const {
  EmbedNodes nodes;
  NodeId x = input;
  for (const Layer& layer : layers(arch_)) {
    switch (layer.kind) {
      case Kind::conv:
        x = ops::conv2d(g, x, g.leaf(layer.name + ".weight"), g.leaf(layer.name + ".bias"));
        break;
      case Kind::dense:
        x = ops::add_bias(g, ops::matmul(g, x, g.leaf(layer.name + ".weight")),
                          g.leaf(layer.name + ".bias"));
        break;
      case Kind::batch_norm: {
        NodeId gamma = g.leaf(layer.name + ".gamma");
        NodeId beta = g.leaf(layer.name + ".beta");
        if (mode == Mode::train) {
          x = ops::batch_norm_train(g, x, gamma, beta, T(kBatchNormEpsilon));
          nodes.batch_norm.emplace_back(layer.name, x);
        } else {
          x = ops::batch_norm_eval(g, x, gamma, beta, g.leaf(layer.name + ".running_mean"),
                                   g.leaf(layer.name + ".running_var"), T(kBatchNormEpsilon));
        }
        break;
      }
      case Kind::relu: x = ops::relu(g, x); break;
      case Kind::pool: x = ops::max_pool2(g, x); break;
      case Kind::flatten: x = ops::flatten(g, x); break;
    }
  }
  nodes.embedding = x;
  return nodes;
}

template <typename T>
void EmbeddingModel::bind(Graph<T>& g) const {
  bind_present(g, params_);
  bind_present(g, buffers_);
}

void EmbeddingModel::absorb_batch_stats(const Graph<float>& g, const EmbedNodes& nodes) {
  for (const auto& [name, id] : nodes.batch_norm) {
    const auto stats = ops::batch_norm_stats(g, id);
    Tensor<float>& mean = buffers_.at(name + ".running_mean");
    Tensor<float>& var = buffers_.at(name + ".running_var");
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = kBatchNormMomentum * mean[c] + (1 - kBatchNormMomentum) * stats.mean[c];
      var[c] = kBatchNormMomentum * var[c] + (1 - kBatchNormMomentum) * stats.variance[c];
    }
  }
}

template <typename T>
NodeId ClassifierHead::build(Graph<T>& g, NodeId embedding) const {
  return ops::add_bias(g, ops::matmul(g, embedding, g.leaf(std::string(kWeightName))),
                       g.leaf(std::string(kBiasName)));
}

template <typename T>
void ClassifierHead::bind(Graph<T>& g) const {
  g.bind(kWeightName, cast_tensor<T>(weight));
  g.bind(kBiasName, cast_tensor<T>(bias));
}

EmbeddingModel build_architecture(Arch arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamMap params, buffers;
  for (const Layer& layer : layers(arch)) {
    switch (layer.kind) {
      case Kind::conv: {
        Tensor<float> w({kKernel, kKernel, layer.in, layer.out});
        fill_truncated_normal(w, kKernel * kKernel * layer.in, rng);
        params.emplace(layer.name + ".weight", std::move(w));
        params.emplace(layer.name + ".bias", Tensor<float>({layer.out}, 0.0f));
        break;
      }
      case Kind::dense: {
        Tensor<float> w({layer.in, layer.out});
        fill_truncated_normal(w, layer.in, rng);
        params.emplace(layer.name + ".weight", std::move(w));
        params.emplace(layer.name + ".bias", Tensor<float>({layer.out}, 0.0f));
        break;
      }
      case Kind::batch_norm:
        params.emplace(layer.name + ".gamma", Tensor<float>({layer.out}, 1.0f));
        params.emplace(layer.name + ".beta", Tensor<float>({layer.out}, 0.0f));
        buffers.emplace(layer.name + ".running_mean", Tensor<float>({layer.out}, 0.0f));
        buffers.emplace(layer.name + ".running_var", Tensor<float>({layer.out}, 1.0f));
        break;
      default:
        break;
    }
  }
  return EmbeddingModel(arch, std::move(params), std::move(buffers));
}

ClassifierHead make_head(std::size_t embed_dim, std::size_t n_classes, std::uint64_t seed) {
  if (n_classes == 0) throw std::invalid_argument("classifier head needs at least one class");
  std::mt19937_64 rng(seed);
  ClassifierHead head{Tensor<float>({embed_dim, n_classes}), Tensor<float>({n_classes}, 0.0f)};
  fill_truncated_normal(head.weight, embed_dim, rng);
  return head;
}

ModelWithHead build_architecture(Arch arch, std::optional<std::size_t> n_classes,
                                 std::uint64_t seed) {
  ModelWithHead out{build_architecture(arch, seed), std::nullopt};
  if (n_classes) out.head = make_head(embed_dim(arch), *n_classes, seed ^ 0x68656164ULL);
  return out;
}

namespace {

void check_batch(const EmbeddingModel& model, const Tensor<float>& batch) {
  const Shape expected = model.input_shape();
  if (batch.rank() != expected.size() + 1 ||
      !std::equal(expected.begin(), expected.end(), batch.shape().begin() + 1)) {
    throw ShapeError(std::string(arch_name(model.arch())) + ": input batch " +
                     shape_str(batch.shape()) + " does not match instance shape " +
                     shape_str(expected));
  }
}

Tensor<float> slice_rows(const Tensor<float>& t, std::size_t begin, std::size_t end) {
  Shape shape = t.shape();
  shape[0] = end - begin;
  const std::size_t width = t.row_width();
  return Tensor<float>(shape, std::vector<float>(t.ptr() + begin * width, t.ptr() + end * width));
}

Tensor<float> run_chunked(Graph<float>& g, const Tensor<float>& batch, std::size_t chunk) {
  if (chunk == 0) throw std::invalid_argument("chunk size must be positive");
  const std::size_t n = batch.dim(0);
  if (n <= chunk) {
    g.bind("x", batch);
    return g.forward();
  }
  Tensor<float> out;
  std::size_t width = 0;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    g.bind("x", slice_rows(batch, begin, end));
    const Tensor<float>& part = g.forward();
    if (begin == 0) {
      width = part.dim(1);
      out = Tensor<float>({n, width});
    }
    std::copy(part.data().begin(), part.data().end(), out.ptr() + begin * width);
  }
  return out;
}

}  // namespace

Tensor<float> embed(const EmbeddingModel& model, const Tensor<float>& batch, Mode mode,
                    std::size_t chunk) {
  check_batch(model, batch);
  Graph<float> g;
  model.build(g, g.leaf("x"), mode);
  model.bind(g);
  // Train-mode statistics are batch-wide, so the batch is not split.
  return run_chunked(g, batch, mode == Mode::train ? batch.dim(0) : chunk);
}

Tensor<float> classify_logits(const EmbeddingModel& model, const ClassifierHead& head,
                              const Tensor<float>& batch, std::size_t chunk) {
  check_batch(model, batch);
  if (head.weight.rank() != 2 || head.weight.dim(0) != model.embed_dim()) {
    throw ShapeError("classify_logits: head " + shape_str(head.weight.shape()) +
                     " does not match embedding dimension " +
                     std::to_string(model.embed_dim()));
  }
  Graph<float> g;
  auto nodes = model.build(g, g.leaf("x"), Mode::eval);
  head.build(g, nodes.embedding);
  model.bind(g);
  head.bind(g);
  return run_chunked(g, batch, chunk);
}

AdamState::AdamState(const ParamMap& params, float learning_rate) : lr(learning_rate) {
  for (const auto& [name, p] : params) {
    m.emplace(name, Tensor<float>(p.shape(), 0.0f));
    v.emplace(name, Tensor<float>(p.shape(), 0.0f));
  }
}

void adam_step(AdamState& state, ParamMap& params,
               const std::map<std::string, Tensor<float>>& grads) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("adam_step: no gradient for '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " +
                       shape_str(it->second.shape()) + ", parameter " + shape_str(p.shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(static_cast<double>(state.beta1), t);
  const double c2 = 1.0 - std::pow(static_cast<double>(state.beta2), t);
  const double b1 = state.beta1, b2 = state.beta2;
  for (auto& [name, p] : params) {
    const Tensor<float>& g = grads.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, p.shape(), 0.0f);
    auto [vit, v_new] = state.v.try_emplace(name, p.shape(), 0.0f);
    Tensor<float>& m = mit->second;
    Tensor<float>& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon);
      p[i] = static_cast<float>(p[i] - update);
    }
  }
}

template EmbedNodes EmbeddingModel::build<float>(Graph<float>&, NodeId, Mode) const;
template EmbedNodes EmbeddingModel::build<double>(Graph<double>&, NodeId, Mode) const;
template void EmbeddingModel::bind<float>(Graph<float>&) const;
template void EmbeddingModel::bind<double>(Graph<double>&) const;
template NodeId ClassifierHead::build<float>(Graph<float>&, NodeId) const;
template NodeId ClassifierHead::build<double>(Graph<double>&, NodeId) const;
template void ClassifierHead::bind<float>(Graph<float>&) const;
template void ClassifierHead::bind<double>(Graph<double>&) const;

}  // namespace kitl::nn
