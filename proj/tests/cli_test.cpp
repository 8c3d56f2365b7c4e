#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "kitl/cli/cli.hpp"
#include "kitl/numcore/ops.hpp"

using namespace kitl;
using namespace kitl::cli;
using protocols::Method;

namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("kitl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text, "grid.ini");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, DefaultsFollowTheDatasetTable) {
  const auto cfg = parse_config_text("[grid]\ndataset = isolet\n", "a.ini", "/data");
  EXPECT_EQ(cfg.grid.methods, protocols::all_methods());
  EXPECT_EQ(cfg.grid.n_values, (std::vector<std::size_t>{5, 10}));
  EXPECT_EQ(cfg.grid.k_values, (std::vector<std::size_t>{1, 10, 50, 100, 200}));
  EXPECT_EQ(cfg.grid.replications, 10u);
  EXPECT_FALSE(cfg.grid.augment_rotations);
  EXPECT_EQ(cfg.protocol.k_prime, 50u);
  EXPECT_FLOAT_EQ(cfg.protocol.lr_source.at(Method::histloss), 0.005f);
  EXPECT_FLOAT_EQ(cfg.protocol.lr_source.at(Method::protonet), 0.0001f);
  EXPECT_EQ(cfg.paths.dataset_file, fs::path("/data/isolet.kitl"));
  EXPECT_EQ(cfg.paths.output_dir, fs::path("results/isolet"));

  const auto mnist = parse_config_text("[grid]\ndataset = mnist\n");
  EXPECT_FLOAT_EQ(mnist.protocol.lr_source.at(Method::adaptprotonet), 0.001f);
  EXPECT_FLOAT_EQ(mnist.protocol.lr_adapt.at(Method::baseline), 0.005f);
  EXPECT_EQ(mnist.grid.n_values, (std::vector<std::size_t>{5}));
  EXPECT_TRUE(parse_config_text("[grid]\ndataset = omniglot\n").grid.augment_rotations);
  EXPECT_TRUE(mnist.grid.fixed_split);
  EXPECT_FALSE(cfg.grid.fixed_split);
  EXPECT_FALSE(parse_config_text("[grid]\ndataset = mnist\nfixed_split = false\n").grid.fixed_split);
}

TEST(Config, OverridesAndComments) {
  const auto cfg = parse_config_text(
      "# desk run\n[grid]\ndataset = omniglot  # inline\nmethods = histloss, protonet\nn = 5\n"
      "k = 1, 5\nreplications = 2\nbase_seed = 9\nmode = episodic\naugment_rotations = false\n"
      "[protocol]\npatience = 4\nlr_source.histloss = 0.01\nlr_adapt.protonet = 2e-4\n"
      "[paths]\ndataset_file = /tmp/o.kitl\noutput_dir = out\n");
  EXPECT_EQ(cfg.grid.methods, (std::vector<Method>{Method::histloss, Method::protonet}));
  EXPECT_EQ(cfg.grid.k_values, (std::vector<std::size_t>{1, 5}));
  EXPECT_EQ(cfg.grid.base_seed, 9u);
  EXPECT_EQ(cfg.grid.mode, protocols::SourceMode::episodic);
  EXPECT_FALSE(cfg.grid.augment_rotations);
  EXPECT_EQ(cfg.protocol.patience, 4u);
  EXPECT_FLOAT_EQ(cfg.protocol.lr_source.at(Method::histloss), 0.01f);
  EXPECT_FLOAT_EQ(cfg.protocol.lr_adapt.at(Method::protonet), 2e-4f);
  const auto p = protocol_for(cfg, Method::protonet);
  EXPECT_EQ(p.patience, 4u);
  EXPECT_EQ(p.mode, protocols::SourceMode::episodic);
  EXPECT_FLOAT_EQ(p.lr_adapt, 2e-4f);
  EXPECT_EQ(p.arch, nn::Arch::omniglot);
}

TEST(Config, InvalidConditionNamesAllowedValues) {
  const std::string e = error_of("[grid]\ndataset = omniglot\nk = 1, 3\n");
  EXPECT_NE(e.find("grid.ini:3"), std::string::npos) << e;
  EXPECT_NE(e.find("k = 3 is not a valid omniglot condition (allowed k: 1, 5, 10)"), std::string::npos) << e;
  EXPECT_NE(error_of("[grid]\ndataset = mnist\nn = 10\n").find("allowed n: 5"), std::string::npos);
}

TEST(Config, ErrorsNameTheKey) {
  EXPECT_NE(error_of("[grid]\ndataset = mnist\n[protocol]\npatiance = 3\n").find("grid.ini:4: unknown key 'patiance'"),
            std::string::npos);
  EXPECT_NE(error_of("[grid]\ndataset = mnist\ndataset = isolet\n").find("duplicate key 'dataset'"),
            std::string::npos);
  EXPECT_NE(error_of("[grid]\n").find("dataset is required"), std::string::npos);
  EXPECT_NE(error_of("[grid]\ndataset = cifar\n").find("grid.ini:2"), std::string::npos);
  EXPECT_NE(error_of("[model]\n").find("unknown section [model]"), std::string::npos);
  EXPECT_NE(error_of("[grid]\ndataset = mnist\nreplications = ten\n").find("replications"), std::string::npos);
  EXPECT_NE(error_of("[grid]\ndataset = mnist\nmethods = histloss, maml\n").find("maml"), std::string::npos);
  EXPECT_NE(error_of("dataset = mnist\n").find("outside a section"), std::string::npos);
}

TEST(Config, SerializeRoundTrips) {
  for (const char* text :
       {"[grid]\ndataset = isolet\n", "[grid]\ndataset = tinyimagenet\nmethods = baseline\nk = 10\n",
        "[grid]\ndataset = omniglot\nmode = episodic\n[protocol]\nadapt_tolerance = 3.5e-5\nsource_classes = 4800\n"}) {
    const auto cfg = parse_config_text(text, "a.ini", "/srv/data");
    const auto again = parse_config_text(serialize_config(cfg), "b.ini", "elsewhere");
    EXPECT_EQ(again, cfg) << serialize_config(cfg);
    EXPECT_EQ(serialize_config(again), serialize_config(cfg));
  }
}

// 10 isolet-shaped classes of 310 noisy blobs, enough for the table's
// source and target sizes at n = 5.
class GridTest : public TempDir {
 protected:
  void SetUp() override {
    TempDir::SetUp();
    std::mt19937_64 rng(8);
    std::normal_distribution<float> normal;
    constexpr std::size_t kClasses = 10, kPer = 310, kDim = 617;
    std::vector<std::vector<float>> centres(kClasses, std::vector<float>(kDim));
    for (auto& c : centres) {
      for (float& v : c) v = normal(rng);
    }
    Tensor<float> x({kClasses * kPer, kDim});
    std::vector<int> y(kClasses * kPer);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = static_cast<int>(i % kClasses);
      for (std::size_t j = 0; j < kDim; ++j) x[i * kDim + j] = centres[y[i]][j] + 1.5f * normal(rng);
    }
    data::write_kitl(dir_ / "isolet.kitl", data::make_dataset("isolet", std::move(x), std::move(y)));
    config_ = parse_config_text("[grid]\ndataset = isolet\nmethods = histloss, baseline\nn = 5\nk = 1, 10\n"
                                "[protocol]\nmax_source_checks = 1\nmax_adapt_epochs = 5\n[paths]\ndata_dir = " +
                                dir_.string() + "\noutput_dir = " + (dir_ / "out").string() + "\n");
  }

  ExperimentConfig config_;
};

TEST_F(GridTest, RunsEveryConditionAndResumes) {
  const auto outcome = run_grid(config_, GridOptions{});
  EXPECT_EQ(outcome.completed, 40u);
  EXPECT_EQ(outcome.failed, 0u);
  EXPECT_EQ(outcome.exit_status(), 0);
  const fs::path out = dir_ / "out";
  const auto rows = eval::read_results_csv(out / "results.csv");
  ASSERT_EQ(rows.size(), 40u);
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  EXPECT_TRUE(fs::exists(out / "error_reduction.csv"));
  EXPECT_TRUE(fs::exists(out / "logs" / "isolet_histloss_n5_k10_r3.log"));
  EXPECT_EQ(parse_config(out / "config.ini"), config_);
  // Methods of one replication read the same split.
  EXPECT_EQ(slurp(out / "manifests" / "isolet_n5_k10_r4_histloss.txt"),
            slurp(out / "manifests" / "isolet_n5_k10_r4_baseline.txt"));
  EXPECT_NE(slurp(out / "manifests" / "isolet_n5_k10_r4_histloss.txt"),
            slurp(out / "manifests" / "isolet_n5_k10_r5_histloss.txt"));

  // Without --resume an existing grid is left alone.
  EXPECT_THROW(run_grid(config_, GridOptions{}), ConfigError);

  // Interrupt after 15 rows, then resume.
  std::vector<eval::RunResult> partial(rows.begin(), rows.begin() + 15);
  eval::write_results_csv(out / "results.csv", partial);
  GridOptions resume;
  resume.resume = true;
  resume.workers = 2;
  const auto second = run_grid(config_, resume);
  EXPECT_EQ(second.skipped, 15u);
  EXPECT_EQ(second.completed, 25u);
  const auto resumed = eval::read_results_csv(out / "results.csv");
  ASSERT_EQ(resumed.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(resumed[i].method, rows[i].method);
    EXPECT_EQ(resumed[i].n, rows[i].n);
    EXPECT_EQ(resumed[i].k, rows[i].k);
    EXPECT_EQ(resumed[i].replication, rows[i].replication);
    EXPECT_EQ(resumed[i].accuracy, rows[i].accuracy) << i;
    EXPECT_EQ(resumed[i].num_queries, rows[i].num_queries);
  }
}

TEST_F(GridTest, FailuresAreCountedNotFatal) {
  auto cfg = config_;
  cfg.paths.output_dir = dir_ / "bad";
  cfg.grid.replications = 1;
  cfg.grid.methods = {Method::histloss};
  std::vector<float> tiny(617 * 10, 0.5f);
  std::vector<int> labels(10);
  for (int i = 0; i < 10; ++i) labels[i] = i;
  const auto ds = data::make_dataset("isolet", Tensor<float>({10, 617}, tiny), labels);
  const auto outcome = run_grid(cfg, ds, GridOptions{});
  EXPECT_EQ(outcome.failed, 2u);
  EXPECT_EQ(outcome.exit_status(), 1);
  const std::string log = slurp(dir_ / "bad" / "logs" / "isolet_histloss_n5_k1_r0.log");
  EXPECT_NE(log.find("error: "), std::string::npos);
}

namespace {

// Relu whose backward doubles the incoming gradient.
class BrokenRelu final : public Op<double> {
 public:
  std::string_view name() const override { return "relu"; }
  void forward(std::span<const Tensor<double>* const> in, Tensor<double>& out) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, (*in[0])[i]);
  }
  void backward(std::span<const Tensor<double>* const> in, const Tensor<double>&, const Tensor<double>& gout,
                std::span<Tensor<double>* const> gin) override {
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if ((*in[0])[i] > 0.0) (*gin[0])[i] += 2.0 * gout[i];
    }
  }
};

void build_mlp(Graph<double>& g, bool broken) {
  const NodeId h = ops::matmul(g, g.leaf("x"), g.leaf("w"));
  const NodeId a = broken ? g.apply(std::make_unique<BrokenRelu>(), {h}) : ops::relu(g, h);
  ops::mean(g, ops::exp(g, ops::scale(g, a, 0.5)));
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal;
  Tensor<double> x({4, 3}), w({3, 5});
  for (double& v : x.data()) v = normal(rng);
  for (double& v : w.data()) v = normal(rng);
  g.bind("x", x);
  g.bind("w", w);
}

}  // namespace

TEST(Gradcheck, NegativeControlNamesTheBrokenOp) {
  Graph<double> good;
  build_mlp(good, false);
  const auto ok = check_case("mlp", good, {"x", "w"}, {}, 0, 1);
  EXPECT_TRUE(ok.pass) << ok.max_rel_err;
  EXPECT_TRUE(ok.failing_ops.empty());

  Graph<double> bad;
  build_mlp(bad, true);
  const auto fail = check_case("mlp_broken", bad, {"x", "w"}, {}, 0, 1);
  EXPECT_FALSE(fail.pass);
  EXPECT_GT(fail.max_rel_err, 0.1);
  EXPECT_EQ(fail.failing_ops, (std::vector<std::string>{"relu"}));

  GradcheckReport report{{ok, fail}};
  EXPECT_FALSE(report.pass());
  EXPECT_NE(report.text().find("FAIL mlp_broken"), std::string::npos);
  EXPECT_NE(report.text().find("failing_ops=relu"), std::string::npos);
  EXPECT_NE(report.text().find("1/2 gradient checks passed"), std::string::npos);
}

TEST(Gradcheck, StructuralZerosMustBeZero) {
  Graph<double> g;
  build_mlp(g, false);
  EXPECT_FALSE(check_case("not_zero", g, {"w"}, {"w"}, 0, 1).pass);
}
