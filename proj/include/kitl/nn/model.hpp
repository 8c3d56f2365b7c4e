#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kitl/numcore/graph.hpp"

namespace kitl::nn {

enum class Arch { mnist, isolet, omniglot, tinyimagenet };

Arch parse_arch(std::string_view name);
std::string_view arch_name(Arch arch);

// Per-instance input extents: HWC for images, [features] for isolet.
Shape input_shape(Arch arch);
std::size_t embed_dim(Arch arch);

using ParamMap = std::map<std::string, Tensor<float>>;

enum class Mode { train, eval };

inline constexpr float kBatchNormEpsilon = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.9f;

// Graph nodes produced by EmbeddingModel::build.
struct EmbedNodes {
  NodeId embedding = 0;
  // (layer name, batch_norm_train node) in layer order; empty in eval mode.
  std::vector<std::pair<std::string, NodeId>> batch_norm;
};

class EmbeddingModel {
 public:
  EmbeddingModel() = default;
  EmbeddingModel(Arch arch, ParamMap params, ParamMap buffers);

  Arch arch() const { return arch_; }
  std::size_t embed_dim() const { return nn::embed_dim(arch_); }
  Shape input_shape() const { return nn::input_shape(arch_); }

  // Trainable parameters, keyed "layer.role" (conv1.weight, bn1.gamma, ...).
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }
  // Batchnorm running statistics (bnN.running_mean / bnN.running_var).
  ParamMap& buffers() { return buffers_; }
  const ParamMap& buffers() const { return buffers_; }

  std::size_t parameter_count() const;

  // Conv biases directly followed by batchnorm. The network output does not
  // depend on them (the batch mean absorbs any shift), so their gradient is
  // identically zero.
  std::vector<std::string> batch_norm_absorbed_params() const;

  // Appends the network to `g`, reading a [batch, input_shape...] tensor
  // from `input`. Creates one leaf per parameter (and per buffer in eval
  // mode) named as in params()/buffers(). Call bind() before forward.
  template <typename T>
  EmbedNodes build(Graph<T>& g, NodeId input, Mode mode) const;

  // Binds every parameter/buffer leaf present in `g` to this model's values.
  template <typename T>
  void bind(Graph<T>& g) const;

  // running = momentum * running + (1 - momentum) * batch, for each
  // batchnorm layer of a train-mode build that has been evaluated.
  void absorb_batch_stats(const Graph<float>& g, const EmbedNodes& nodes);

  bool operator==(const EmbeddingModel&) const = default;

 private:
  Arch arch_ = Arch::isolet;
  ParamMap params_;
  ParamMap buffers_;
};

struct ClassifierHead {
  Tensor<float> weight;  // [embed_dim, n_classes]
  Tensor<float> bias;    // [n_classes]

  std::size_t n_classes() const { return bias.size(); }

  static constexpr std::string_view kWeightName = "head.weight";
  static constexpr std::string_view kBiasName = "head.bias";

  // logits = embedding * weight + bias, with leaves head.weight/head.bias.
  template <typename T>
  NodeId build(Graph<T>& g, NodeId embedding) const;

  template <typename T>
  void bind(Graph<T>& g) const;

  bool operator==(const ClassifierHead&) const = default;
};

// Truncated normal (resampled beyond 2 sigma) with std 1/sqrt(fan_in);
// biases and batchnorm shifts zero, batchnorm scales one.
EmbeddingModel build_architecture(Arch arch, std::uint64_t seed);

ClassifierHead make_head(std::size_t embed_dim, std::size_t n_classes, std::uint64_t seed);

struct ModelWithHead {
  EmbeddingModel model;
  std::optional<ClassifierHead> head;
};

ModelWithHead build_architecture(Arch arch, std::optional<std::size_t> n_classes,
                                 std::uint64_t seed);

// [batch, embed_dim]; eval mode uses running batchnorm statistics.
Tensor<float> embed(const EmbeddingModel& model, const Tensor<float>& batch,
                    Mode mode = Mode::eval, std::size_t chunk = 256);

Tensor<float> classify_logits(const EmbeddingModel& model, const ClassifierHead& head,
                              const Tensor<float>& batch, std::size_t chunk = 256);

struct AdamState {
  float lr = 0.001f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  std::uint64_t step = 0;
  ParamMap m;
  ParamMap v;

  AdamState() = default;
  AdamState(const ParamMap& params, float learning_rate);
};

// One bias-corrected Adam update of every entry of `params`. Each parameter
// needs a same-shaped gradient; extra gradients are ignored.
void adam_step(AdamState& state, ParamMap& params,
               const std::map<std::string, Tensor<float>>& grads);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_checkpoint(const std::filesystem::path& path, const EmbeddingModel& model,
                      const ClassifierHead* head = nullptr);

struct Checkpoint {
  EmbeddingModel model;
  std::optional<ClassifierHead> head;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace kitl::nn
