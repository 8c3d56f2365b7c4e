#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "kitl/losses/losses.hpp"
#include "kitl/nn/model.hpp"
#include "kitl/numcore/gradcheck.hpp"
#include "kitl/numcore/ops.hpp"
#include "test_util.hpp"

namespace kitl::nn {
namespace {

using testing::label_tensor;

Tensor<float> random_batch(Arch arch, std::size_t n, std::uint64_t seed) {
  Shape shape = input_shape(arch);
  shape.insert(shape.begin(), n);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> t(shape);
  for (float& v : t.data()) v = u(rng);
  return t;
}

TEST(Architecture, ParameterCounts) {
  EXPECT_EQ(build_architecture(Arch::isolet, 1).parameter_count(), 87360u);
  EXPECT_EQ(build_architecture(Arch::mnist, 1).parameter_count(), 812512u);
  EXPECT_EQ(build_architecture(Arch::omniglot, 1).parameter_count(), 219840u);
  EXPECT_EQ(build_architecture(Arch::tinyimagenet, 1).parameter_count(), 291168u);
}

TEST(Architecture, IsoletShapes) {
  const auto m = build_architecture(Arch::isolet, 3);
  EXPECT_EQ(m.params().at("fc1.weight").shape(), (Shape{617, 128}));
  EXPECT_EQ(m.params().at("fc1.bias").shape(), (Shape{128}));
  EXPECT_EQ(m.params().at("fc2.weight").shape(), (Shape{128, 64}));
  EXPECT_EQ(m.params().at("fc2.bias").shape(), (Shape{64}));
  EXPECT_EQ(m.params().size(), 4u);
  EXPECT_EQ(m.embed_dim(), 64u);
}

TEST(Architecture, EmbedDims) {
  EXPECT_EQ(embed_dim(Arch::mnist), 128u);
  EXPECT_EQ(embed_dim(Arch::omniglot), 128u);
  EXPECT_EQ(embed_dim(Arch::tinyimagenet), 128u);
  EXPECT_EQ(embed_dim(Arch::isolet), 64u);
}

TEST(Architecture, HeadShape) {
  const auto built = build_architecture(Arch::mnist, 5, 7);
  ASSERT_TRUE(built.head.has_value());
  EXPECT_EQ(built.head->weight.shape(), (Shape{128, 5}));
  EXPECT_EQ(built.head->bias.shape(), (Shape{5}));
  EXPECT_FALSE(build_architecture(Arch::mnist, std::nullopt, 7).head.has_value());
}

TEST(Architecture, SeedDeterminism) {
  EXPECT_EQ(build_architecture(Arch::omniglot, 11), build_architecture(Arch::omniglot, 11));
  EXPECT_NE(build_architecture(Arch::omniglot, 11), build_architecture(Arch::omniglot, 12));
}

TEST(Architecture, InitStatistics) {
  const auto m = build_architecture(Arch::mnist, 2);
  const Tensor<float>& w = m.params().at("fc.weight");
  const double bound = 2.0 / std::sqrt(6272.0);
  double sum = 0, sq = 0;
  for (float v : w.data()) {
    EXPECT_LE(std::abs(v), bound + 1e-7);
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(w.size());
  // A normal truncated at 2 sigma has variance 0.774 sigma^2.
  EXPECT_NEAR(std::sqrt(sq / n - (sum / n) * (sum / n)) * std::sqrt(6272.0), std::sqrt(0.774), 0.01);
  for (float v : m.params().at("conv1.bias").data()) EXPECT_EQ(v, 0.0f);
}

TEST(Architecture, UnknownArchThrows) {
  EXPECT_THROW(parse_arch("vgg"), std::invalid_argument);
  for (Arch a : {Arch::mnist, Arch::isolet, Arch::omniglot, Arch::tinyimagenet}) {
    EXPECT_EQ(parse_arch(arch_name(a)), a);
  }
}

TEST(Architecture, ConstructorValidatesShapes) {
  auto m = build_architecture(Arch::isolet, 1);
  ParamMap p = m.params();
  p["fc2.weight"] = Tensor<float>({128, 63});
  EXPECT_THROW(EmbeddingModel(Arch::isolet, p, {}), ShapeError);
  p.erase("fc2.weight");
  EXPECT_THROW(EmbeddingModel(Arch::isolet, p, {}), ShapeError);
}

TEST(Embed, ShapesPerArchitecture) {
  for (Arch a : {Arch::mnist, Arch::isolet, Arch::omniglot, Arch::tinyimagenet}) {
    const auto m = build_architecture(a, 3);
    const auto e = embed(m, random_batch(a, 3, 1));
    EXPECT_EQ(e.shape(), (Shape{3, embed_dim(a)})) << arch_name(a);
    EXPECT_TRUE(all_finite(e));
  }
  const auto iso = build_architecture(Arch::isolet, 3);
  EXPECT_EQ(embed(iso, random_batch(Arch::isolet, 7, 2)).shape(), (Shape{7, 64}));
}

TEST(Embed, DeterministicInEvalMode) {
  const auto m = build_architecture(Arch::omniglot, 4);
  const auto batch = random_batch(Arch::omniglot, 5, 3);
  EXPECT_EQ(embed(m, batch), embed(m, batch));
}

TEST(Embed, ChunkingMatchesSinglePass) {
  const auto m = build_architecture(Arch::isolet, 4);
  const auto batch = random_batch(Arch::isolet, 10, 3);
  const auto whole = embed(m, batch, Mode::eval, 256);
  const auto chunked = embed(m, batch, Mode::eval, 3);
  for (std::size_t i = 0; i < whole.size(); ++i) EXPECT_NEAR(whole[i], chunked[i], 1e-5f);
}

TEST(Embed, TrainAndEvalBatchNormDiffer) {
  const auto m = build_architecture(Arch::omniglot, 4);
  const auto batch = random_batch(Arch::omniglot, 4, 5);
  const auto a = embed(m, batch, Mode::train);
  const auto b = embed(m, batch, Mode::eval);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, double(std::abs(a[i] - b[i])));
  EXPECT_GT(diff, 1e-3);
}

TEST(Embed, ShapeMismatchThrows) {
  const auto m = build_architecture(Arch::mnist, 1);
  EXPECT_THROW(embed(m, random_batch(Arch::isolet, 2, 1)), ShapeError);
  EXPECT_THROW(embed(m, Tensor<float>({2, 28, 28})), ShapeError);
}

TEST(BatchNorm, RunningStatsMomentum) {
  auto m = build_architecture(Arch::omniglot, 2);
  const auto batch = random_batch(Arch::omniglot, 6, 9);
  Graph<float> g;
  auto nodes = m.build(g, g.leaf("x"), Mode::train);
  m.bind(g);
  g.bind("x", batch);
  g.forward();
  ASSERT_EQ(nodes.batch_norm.size(), 3u);
  const auto stats = ops::batch_norm_stats(g, nodes.batch_norm[0].second);
  const Tensor<float> batch_mean = stats.mean;
  const Tensor<float> batch_var = stats.variance;
  m.absorb_batch_stats(g, nodes);
  const auto& rm = m.buffers().at("bn1.running_mean");
  const auto& rv = m.buffers().at("bn1.running_var");
  for (std::size_t c = 0; c < rm.size(); ++c) {
    EXPECT_NEAR(rm[c], 0.1f * batch_mean[c], 1e-6f);
    EXPECT_NEAR(rv[c], 0.9f + 0.1f * batch_var[c], 1e-6f);
  }
}

TEST(ClassifyLogits, AffineOfEmbedding) {
  auto built = build_architecture(Arch::isolet, 3, 5);
  auto& head = *built.head;
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd;
  for (float& b : head.bias.data()) b = nd(rng);
  const auto batch = random_batch(Arch::isolet, 4, 8);
  const auto e = embed(built.model, batch);
  const auto z = classify_logits(built.model, head, batch);
  ASSERT_EQ(z.shape(), (Shape{4, 3}));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      double expect = head.bias[c];
      for (std::size_t j = 0; j < 64; ++j) expect += double(e[i * 64 + j]) * head.weight[j * 3 + c];
      EXPECT_NEAR(z[i * 3 + c], expect, 1e-4);
    }
  }
}

TEST(ClassifyLogits, ZeroAndOneHotHeads) {
  auto built = build_architecture(Arch::isolet, 4, 5);
  ClassifierHead zero{Tensor<float>({64, 4}, 0.0f), Tensor<float>({4}, 0.0f)};
  const auto batch = random_batch(Arch::isolet, 6, 2);
  const auto zeros = classify_logits(built.model, zero, batch);
  for (float v : zeros.data()) EXPECT_EQ(v, 0.0f);

  ClassifierHead onehot = zero;
  onehot.bias[2] = 1e4f;
  const auto z = classify_logits(built.model, onehot, batch);
  for (std::size_t i = 0; i < 6; ++i) {
    const float* row = z.ptr() + i * 4;
    EXPECT_EQ(std::max_element(row, row + 4) - row, 2);
  }
  ClassifierHead bad{Tensor<float>({128, 4}), Tensor<float>({4})};
  EXPECT_THROW(classify_logits(built.model, bad, batch), ShapeError);
}

ParamMap small_params() {
  return {{"a", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6})}, {"b", Tensor<float>({2}, {-1, 0.5})}};
}

std::map<std::string, Tensor<float>> filled_grads(const ParamMap& p, float g) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& [name, t] : p) out.emplace(name, Tensor<float>(t.shape(), g));
  return out;
}

TEST(Adam, ZeroGradientLeavesParams) {
  ParamMap p = small_params();
  AdamState s(p, 0.005f);
  adam_step(s, p, filled_grads(p, 0.0f));
  EXPECT_EQ(p, small_params());
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstUnitStepMovesByLearningRate) {
  ParamMap p = small_params();
  AdamState s(p, 0.005f);
  adam_step(s, p, filled_grads(p, 1.0f));
  const ParamMap before = small_params();
  for (const auto& [name, t] : p) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_NEAR(before.at(name)[i] - t[i], 0.005 / (1 + 1e-8), 1e-6);
    }
  }
}

TEST(Adam, DeterministicAndAntisymmetric) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd;
  ParamMap base = small_params();
  auto grads = filled_grads(base, 0.0f);
  for (auto& [name, g] : grads) for (float& v : g.data()) v = nd(rng);
  auto neg = grads;
  for (auto& [name, g] : neg) for (float& v : g.data()) v = -v;

  ParamMap p1 = base, p2 = base, p3 = base;
  AdamState s1(base, 0.01f), s2(base, 0.01f), s3(base, 0.01f);
  adam_step(s1, p1, grads);
  adam_step(s2, p2, grads);
  adam_step(s3, p3, neg);
  EXPECT_EQ(p1, p2);
  for (const auto& [name, t] : base) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_NEAR(p1.at(name)[i] - t[i], -(p3.at(name)[i] - t[i]), 1e-6f);
    }
  }
}

TEST(Adam, MissingGradientThrows) {
  ParamMap p = small_params();
  AdamState s(p, 0.01f);
  auto grads = filled_grads(p, 1.0f);
  grads.erase("b");
  EXPECT_THROW(adam_step(s, p, grads), std::invalid_argument);
  EXPECT_EQ(s.step, 0u);
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path path_ =
      std::filesystem::temp_directory_path() /
      ("kitl_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
       ::testing::UnitTest::GetInstance()->current_test_info()->name() + ".bin");
  void TearDown() override { std::filesystem::remove(path_); }
};

TEST_F(CheckpointTest, RoundTripWithHead) {
  auto built = build_architecture(Arch::omniglot, 6, 21);
  built.model.buffers().at("bn2.running_var")[3] = 4.25f;
  write_checkpoint(path_, built.model, &*built.head);
  const auto ck = read_checkpoint(path_);
  EXPECT_EQ(ck.model, built.model);
  ASSERT_TRUE(ck.head.has_value());
  EXPECT_EQ(*ck.head, *built.head);
}

TEST_F(CheckpointTest, HeaderThenLittleEndianPayload) {
  const auto m = build_architecture(Arch::isolet, 2);
  write_checkpoint(path_, m);
  std::ifstream in(path_, std::ios::binary);
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, "kitl-checkpoint 1");
  EXPECT_EQ(std::filesystem::file_size(path_) > m.parameter_count() * 4, true);
  EXPECT_FALSE(read_checkpoint(path_).head.has_value());
}

TEST_F(CheckpointTest, CorruptFilesRejected) {
  const auto m = build_architecture(Arch::isolet, 2);
  write_checkpoint(path_, m);
  const auto size = std::filesystem::file_size(path_);
  std::filesystem::resize_file(path_, size - 4);
  EXPECT_THROW(read_checkpoint(path_), CheckpointError);
  std::ofstream(path_, std::ios::trunc) << "not a checkpoint\n";
  EXPECT_THROW(read_checkpoint(path_), CheckpointError);
}

// Softmax cross-entropy through each architecture, double precision.
class ArchGradient : public ::testing::TestWithParam<Arch> {};

TEST_P(ArchGradient, CrossEntropyThroughNetwork) {
  const Arch arch = GetParam();
  const auto built = build_architecture(arch, 3, 17);
  Graph<double> g;
  auto nodes = built.model.build(g, g.leaf("x"), Mode::train);
  losses::softmax_xent(g, built.head->build(g, nodes.embedding), g.leaf("y"));
  built.model.bind(g);
  built.head->bind(g);
  g.bind("x", random_batch(arch, 3, 4).cast<double>());
  g.bind("y", label_tensor({0, 1, 2}));
  GradcheckOptions opts;
  opts.max_coords = 6;
  const auto absorbed = built.model.batch_norm_absorbed_params();
  for (const auto& [name, t] : built.model.params()) {
    if (std::ranges::find(absorbed, name) != absorbed.end()) {
      g.forward();
      const auto grads = g.backward({name});
      for (double v : grads.at(name).data()) EXPECT_NEAR(v, 0.0, 1e-12) << name;
      continue;
    }
    opts.seed = std::hash<std::string>{}(name);
    const auto report = check_gradient(g, name, 1e-5, 1e-4, opts);
    EXPECT_TRUE(report.pass) << name << " err " << report.max_rel_err;
  }
}

TEST(Architecture, BatchNormAbsorbedBiases) {
  EXPECT_TRUE(build_architecture(Arch::mnist, 1).batch_norm_absorbed_params().empty());
  EXPECT_EQ(build_architecture(Arch::omniglot, 1).batch_norm_absorbed_params(),
            (std::vector<std::string>{"conv1.bias", "conv2.bias", "conv3.bias"}));
  EXPECT_EQ(build_architecture(Arch::tinyimagenet, 1).batch_norm_absorbed_params().size(), 4u);
}

INSTANTIATE_TEST_SUITE_P(AllArchitectures, ArchGradient,
                         ::testing::Values(Arch::mnist, Arch::isolet, Arch::omniglot,
                                           Arch::tinyimagenet),
                         [](const auto& info) { return std::string(arch_name(info.param)); });

}  // namespace
}  // namespace kitl::nn
