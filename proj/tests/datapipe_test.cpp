#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "kitl/datapipe/datapipe.hpp"

using namespace kitl;
using namespace kitl::data;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("kitl_datapipe_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// `classes` classes with `per_class` instances each of a side x side image.
Dataset synthetic(std::size_t classes, std::size_t per_class, std::size_t side = 4) {
  const std::size_t n = classes * per_class;
  Tensor<float> x({n, side, side, 1});
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % classes);
    for (std::size_t j = 0; j < side * side; ++j) x[i * side * side + j] = float(i * 31 + j) / float(n * 40);
  }
  return make_dataset("synthetic", std::move(x), std::move(y));
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

void write_idx_pair(const std::filesystem::path& dir, const std::string& prefix, std::size_t count,
                    std::uint32_t image_magic = 0x803) {
  std::ofstream img(dir / (prefix + "-images-idx3-ubyte"), std::ios::binary);
  write_be32(img, image_magic);
  write_be32(img, static_cast<std::uint32_t>(count));
  write_be32(img, 28);
  write_be32(img, 28);
  for (std::size_t i = 0; i < count * 28 * 28; ++i) img.put(char(i % 256));
  std::ofstream lab(dir / (prefix + "-labels-idx1-ubyte"), std::ios::binary);
  write_be32(lab, 0x801);
  write_be32(lab, static_cast<std::uint32_t>(count));
  for (std::size_t i = 0; i < count; ++i) lab.put(char(i % 10));
}

std::set<std::size_t> as_set(const ClassPartition& p) {
  auto v = flatten(p);
  return {v.begin(), v.end()};
}

}  // namespace

TEST(Ingest, IdxScalesAndCounts) {
  const auto dir = temp_dir("idx");
  write_idx_pair(dir, "train", 30);
  const Dataset ds = ingest(dir / "train-images-idx3-ubyte", Format::idx);
  EXPECT_EQ(ds.size(), 30u);
  EXPECT_EQ(ds.num_classes(), 10u);
  EXPECT_EQ(ds.input_shape, (Shape{28, 28, 1}));
  const auto [lo, hi] = std::minmax_element(ds.features.data().begin(), ds.features.data().end());
  EXPECT_FLOAT_EQ(*lo, 0.0f);
  EXPECT_FLOAT_EQ(*hi, 1.0f);
  EXPECT_FLOAT_EQ(ds.features[1], 1.0f / 255.0f);
}

TEST(Ingest, IdxDirectoryConcatenatesTrainThenTest) {
  const auto dir = temp_dir("idxdir");
  write_idx_pair(dir, "train", 20);
  write_idx_pair(dir, "t10k", 7);
  const Dataset ds = ingest(dir, Format::idx);
  EXPECT_EQ(ds.size(), 27u);
  EXPECT_EQ(ds.labels[20], 0);
  EXPECT_EQ(ds.labels[26], 6);
}

TEST(Ingest, IdxBadMagicNamesOffset) {
  const auto dir = temp_dir("idxbad");
  write_idx_pair(dir, "train", 3, 0x804);
  try {
    ingest(dir / "train-images-idx3-ubyte", Format::idx);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos) << e.what();
  }
}

TEST(Ingest, IdxTruncatedPayload) {
  const auto dir = temp_dir("idxtrunc");
  write_idx_pair(dir, "train", 3);
  std::filesystem::resize_file(dir / "train-images-idx3-ubyte", 16 + 100);
  EXPECT_THROW(ingest(dir / "train-images-idx3-ubyte", Format::idx), DataError);
}

TEST(Ingest, CsvPassesFeaturesThrough) {
  const auto dir = temp_dir("csv");
  {
    std::ofstream out(dir / "d.csv");
    out << "0.5, -2.25, 3\n1e3,4,1.\n\n7,8,3\n";
  }
  const Dataset ds = ingest(dir / "d.csv", Format::csv);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.input_shape, (Shape{2}));
  EXPECT_FLOAT_EQ(ds.features[1], -2.25f);
  EXPECT_FLOAT_EQ(ds.features[2], 1000.0f);
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 1, 3}));
  EXPECT_EQ(ds.classes.at(3), (std::vector<std::size_t>{0, 2}));
}

TEST(Ingest, CsvErrors) {
  const auto dir = temp_dir("csverr");
  auto write = [&](const std::string& text) {
    std::ofstream(dir / "d.csv") << text;
    return dir / "d.csv";
  };
  EXPECT_THROW(ingest(write(""), Format::csv), DataError);
  EXPECT_THROW(ingest(write("1,2,3\n1,2\n"), Format::csv), DataError);
  EXPECT_THROW(ingest(write("1,x,3\n"), Format::csv), DataError);
  EXPECT_THROW(ingest(write("1,2,3.5\n"), Format::csv), DataError);
  EXPECT_THROW(ingest(write("1,2abc,3\n"), Format::csv), DataError);
}

TEST(Ingest, KitlRoundTrip) {
  const auto dir = temp_dir("kitl");
  const Dataset ds = synthetic(3, 5);
  write_kitl(dir / "s.kitl", ds);
  EXPECT_TRUE(std::filesystem::exists(dir / "s.labels"));
  const Dataset back = ingest(dir / "s.kitl", Format::kitl);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.classes, ds.classes);
}

TEST(Ingest, KitlCorruption) {
  const auto dir = temp_dir("kitlbad");
  write_kitl(dir / "s.kitl", synthetic(2, 3));
  {
    std::ofstream out(dir / "s.kitl", std::ios::binary | std::ios::app);
    out.put(0);
  }
  EXPECT_THROW(read_kitl(dir / "s.kitl"), DataError);
  write_kitl(dir / "s.kitl", synthetic(2, 3));
  std::filesystem::resize_file(dir / "s.labels", 8);
  EXPECT_THROW(read_kitl(dir / "s.kitl"), DataError);
  { std::ofstream(dir / "s.kitl", std::ios::binary) << "NOPE1234"; }
  EXPECT_THROW(read_kitl(dir / "s.kitl"), DataError);
  std::ofstream(dir / "empty.kitl").close();
  EXPECT_THROW(read_kitl(dir / "empty.kitl"), DataError);
}

TEST(Ingest, UnknownFormat) { EXPECT_THROW(parse_format("parquet"), DataError); }

TEST(Dataset, ClassListsPartitionInstances) {
  const Dataset ds = synthetic(7, 6);
  std::vector<std::size_t> all = flatten(ds.classes);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(ds.size());
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(all, expect);
  for (const auto& [c, idx] : ds.classes) {
    for (std::size_t i : idx) EXPECT_EQ(ds.labels[i], c);
  }
}

TEST(Rotations, QuadruplesClassesAndInstances) {
  const Dataset ds = synthetic(3, 20);
  const Dataset rot = augment_rotations(ds);
  EXPECT_EQ(rot.num_classes(), 12u);
  EXPECT_EQ(rot.size(), 240u);
  for (const auto& [c, idx] : rot.classes) EXPECT_EQ(idx.size(), 20u);
  for (const auto& [c, g] : rot.groups) EXPECT_EQ(g, c / 4);
}

TEST(Rotations, FourQuarterTurnsAreIdentity) {
  std::vector<float> img(5 * 5 * 2);
  std::iota(img.begin(), img.end(), 0.0f);
  std::vector<float> a = img, b(img.size());
  for (int r = 0; r < 4; ++r) {
    rotate90(a, b, 5, 2);
    std::swap(a, b);
    if (r == 0) {
      EXPECT_NE(a, img);
    }
  }
  EXPECT_EQ(a, img);
}

TEST(Rotations, QuarterTurnIsCounterClockwise) {
  // [[1 2] [3 4]] -> [[2 4] [1 3]]
  const std::vector<float> in = {1, 2, 3, 4};
  std::vector<float> out(4);
  rotate90(in, out, 2, 1);
  EXPECT_EQ(out, (std::vector<float>{2, 4, 1, 3}));
}

TEST(Rotations, NonSquareRejected) {
  Tensor<float> x({2, 3, 4, 1});
  EXPECT_THROW(augment_rotations(make_dataset("r", std::move(x), {0, 1})), DataError);
  Tensor<float> flat({2, 16});
  EXPECT_THROW(augment_rotations(make_dataset("f", std::move(flat), {0, 1})), DataError);
}

TEST(Seeding, StreamsAreIndependent) {
  EXPECT_NE(stream_seed(1, 0, "a"), stream_seed(1, 0, "b"));
  EXPECT_NE(stream_seed(1, 0, "a"), stream_seed(1, 1, "a"));
  EXPECT_NE(stream_seed(1, 0, "a"), stream_seed(2, 0, "a"));
  EXPECT_NE(stream_seed(1, 0, "a", 0), stream_seed(1, 0, "a", 1));
  EXPECT_EQ(stream_seed(9, 3, "x", 4), stream_seed(9, 3, "x", 4));
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Split, FixedMnistDigits) {
  const Dataset ds = synthetic(10, 40);
  SplitConfig cfg{.n = 5, .k = 3, .tau = 20, .nu = 10, .replication = 0, .base_seed = 7,
                  .fixed_split = true};
  const DomainSplit s = make_domain_split(ds, cfg);
  EXPECT_EQ(s.source_classes, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(s.target_classes, (std::vector<int>{5, 6, 7, 8, 9}));
}

TEST(Split, OmniglotQuerySize) {
  const Dataset ds = augment_rotations(synthetic(12, 20));
  const auto& spec = dataset_spec("omniglot");
  const DomainSplit s = make_domain_split(ds, split_config_for(spec, 5, 5, 0, 11));
  EXPECT_EQ(flatten(s.target_query).size(), 5u * (20 - 5));
  for (const auto& [c, idx] : s.source_train) EXPECT_EQ(idx.size(), 15u);
  for (const auto& [c, idx] : s.source_valid) EXPECT_EQ(idx.size(), 5u);
}

TEST(Split, DisjointAndExactForManySeeds) {
  const Dataset ds = augment_rotations(synthetic(30, 20));
  for (std::uint64_t rep = 0; rep < 10; ++rep) {
    for (std::size_t k : {1, 5, 10}) {
      const DomainSplit s = make_domain_split(ds, split_config_for(dataset_spec("omniglot"), 10, k, rep, 3));
      std::set<int> src(s.source_classes.begin(), s.source_classes.end());
      std::set<int> src_groups, tgt_groups;
      for (int c : s.source_classes) src_groups.insert(ds.groups.at(c));
      for (int c : s.target_classes) {
        EXPECT_FALSE(src.contains(c));
        tgt_groups.insert(ds.groups.at(c));
      }
      for (int g : tgt_groups) EXPECT_FALSE(src_groups.contains(g)) << "rotation leak";
      EXPECT_EQ(s.source_classes.size(), 10u);
      EXPECT_EQ(s.target_classes.size(), 10u);
      for (const auto& [c, idx] : s.target_support) EXPECT_EQ(idx.size(), k);
      const auto sup = as_set(s.target_support), qry = as_set(s.target_query);
      for (std::size_t i : sup) EXPECT_FALSE(qry.contains(i));
      const auto tr = as_set(s.source_train), va = as_set(s.source_valid);
      for (std::size_t i : tr) EXPECT_FALSE(va.contains(i));
      for (const auto& [c, idx] : s.target_query) {
        for (std::size_t i : idx) EXPECT_EQ(ds.labels[i], c);
      }
    }
  }
}

TEST(Split, Deterministic) {
  const Dataset ds = synthetic(20, 30);
  SplitConfig cfg{.n = 5, .k = 4, .tau = 15, .nu = 5, .replication = 2, .base_seed = 99};
  EXPECT_EQ(split_manifest(make_domain_split(ds, cfg)), split_manifest(make_domain_split(ds, cfg)));
  SplitConfig other = cfg;
  other.replication = 3;
  EXPECT_NE(split_manifest(make_domain_split(ds, cfg)), split_manifest(make_domain_split(ds, other)));
}

TEST(Split, SourceAndSupportPrefixDoNotDependOnK) {
  const Dataset ds = synthetic(20, 30);
  SplitConfig a{.n = 5, .k = 2, .tau = 15, .nu = 5, .replication = 1, .base_seed = 5};
  SplitConfig b = a;
  b.k = 8;
  const DomainSplit sa = make_domain_split(ds, a), sb = make_domain_split(ds, b);
  EXPECT_EQ(sa.source_classes, sb.source_classes);
  EXPECT_EQ(sa.target_classes, sb.target_classes);
  EXPECT_EQ(sa.source_train, sb.source_train);
  EXPECT_EQ(sa.source_valid, sb.source_valid);
  for (const auto& [c, idx] : sa.target_support) {
    const auto& big = sb.target_support.at(c);
    EXPECT_TRUE(std::equal(idx.begin(), idx.end(), big.begin()));
  }
}

TEST(Split, QueryCapTakesPermutationTail) {
  const Dataset ds = synthetic(10, 50);
  SplitConfig cfg{.n = 5, .k = 1, .tau = 20, .nu = 10, .replication = 0, .base_seed = 1,
                  .fixed_split = true, .query_per_class = 30};
  const DomainSplit s1 = make_domain_split(ds, cfg);
  cfg.k = 20;
  const DomainSplit s20 = make_domain_split(ds, cfg);
  EXPECT_EQ(s1.target_query, s20.target_query);
  EXPECT_EQ(flatten(s1.target_query).size(), 150u);
  cfg.k = 21;
  EXPECT_THROW(make_domain_split(ds, cfg), DataError);
}

TEST(Split, Errors) {
  const Dataset ds = synthetic(9, 30);
  SplitConfig cfg{.n = 5, .k = 1, .tau = 15, .nu = 5};
  EXPECT_THROW(make_domain_split(ds, cfg), DataError);  // 9 < 2n
  cfg.n = 4;
  cfg.tau = 30;
  EXPECT_THROW(make_domain_split(ds, cfg), DataError);
  cfg.tau = 10;
  cfg.k = 30;
  EXPECT_THROW(make_domain_split(ds, cfg), DataError);
  SplitConfig fixed{.n = 5, .k = 1, .tau = 10, .nu = 5, .fixed_split = true};
  EXPECT_THROW(make_domain_split(ds, fixed), DataError);  // no class 9
}

TEST(Split, ManifestListsEveryPartition) {
  const auto dir = temp_dir("manifest");
  const DomainSplit s = make_domain_split(synthetic(10, 10), {.n = 5, .k = 2, .tau = 5, .nu = 2,
                                                               .fixed_split = true});
  write_split_manifest(dir / "m.txt", s);
  std::ifstream in(dir / "m.txt");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_NE(text.find("source_classes 0 1 2 3 4\n"), std::string::npos);
  EXPECT_NE(text.find("target_support 5 2:"), std::string::npos);
  EXPECT_NE(text.find("target_query 9 8:"), std::string::npos);
}

TEST(AdaptationSplit, HalvesSupport) {
  for (std::size_t k : {2, 3, 10}) {
    ClassPartition support;
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < k; ++i) support[c].push_back(c * 100 + i);
    }
    const auto s = split_support_for_adaptation(support, k, 42);
    for (const auto& [c, idx] : support) {
      EXPECT_EQ(s.support.at(c).size(), (k + 1) / 2);
      EXPECT_EQ(s.query.at(c).size(), k / 2);
      std::vector<std::size_t> both = s.support.at(c);
      both.insert(both.end(), s.query.at(c).begin(), s.query.at(c).end());
      std::sort(both.begin(), both.end());
      EXPECT_EQ(both, idx);
    }
  }
  EXPECT_THROW(split_support_for_adaptation({{0, {1}}}, 1, 0), DataError);
  EXPECT_THROW(split_support_for_adaptation({{0, {1, 2, 3}}}, 2, 0), DataError);
}

TEST(Episode, DisjointSupportAndQuery) {
  ClassPartition pool;
  for (int c = 0; c < 80; ++c) {
    for (std::size_t i = 0; i < 15; ++i) pool[c].push_back(c * 15 + i);
  }
  Rng rng(3);
  const Episode ep = sample_episode(pool, 60, 5, 10, rng);
  EXPECT_EQ(ep.classes.size(), 60u);
  EXPECT_TRUE(std::is_sorted(ep.classes.begin(), ep.classes.end()));
  EXPECT_EQ(ep.support.size(), 300u);
  EXPECT_EQ(ep.query.size(), 600u);
  std::set<std::size_t> sup(ep.support.begin(), ep.support.end());
  EXPECT_EQ(sup.size(), ep.support.size());
  for (std::size_t i : ep.query) EXPECT_FALSE(sup.contains(i));
  for (std::size_t j = 0; j < ep.support.size(); ++j) {
    EXPECT_EQ(int(ep.support[j] / 15), ep.classes[j / 5]);
  }
  EXPECT_THROW(sample_episode(pool, 60, 5, 11, rng), DataError);
  EXPECT_THROW(sample_episode(pool, 81, 1, 1, rng), DataError);
}

TEST(Episode, RestrictedModeUsesAllSourceClasses) {
  const DomainSplit s = make_domain_split(synthetic(10, 300), {.n = 5, .k = 1, .tau = 200, .nu = 50,
                                                                .fixed_split = true});
  Rng rng(1);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(sample_source_episode(s, 5, 100, 15, rng).classes, (std::vector<int>{0, 1, 2, 3, 4}));
  }
}

TEST(Minibatches, SizesAndUnion) {
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), 100);
  Rng rng(0);
  const auto batches = minibatches(idx, 4, rng);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 4u);
  EXPECT_EQ(batches[1].size(), 4u);
  EXPECT_EQ(batches[2].size(), 2u);
  std::vector<std::size_t> all;
  for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, idx);
  EXPECT_THROW(minibatches(idx, 0, rng), DataError);
}

TEST(Minibatches, SameSeedSameBatches) {
  std::vector<std::size_t> idx(50);
  std::iota(idx.begin(), idx.end(), 0);
  Rng a(stream_seed(1, 0, "batches", 3)), b(stream_seed(1, 0, "batches", 3));
  EXPECT_EQ(minibatches(idx, 8, a), minibatches(idx, 8, b));
}

TEST(BalancedMinibatches, PositiveAndNegativePairsInEveryBatch) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ClassPartition p;
    const std::size_t classes = 2 + seed % 5;
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t i = 0; i < 3 + (seed + c) % 7; ++i) p[int(c)].push_back(c * 100 + i);
    }
    Rng rng(seed);
    const auto batches = balanced_minibatches(p, 4 + seed % 9, rng);
    std::vector<std::size_t> all;
    for (const auto& b : batches) {
      std::map<std::size_t, int> counts;
      for (std::size_t i : b) ++counts[i / 100];
      EXPECT_GE(counts.size(), 2u);
      EXPECT_TRUE(std::any_of(counts.begin(), counts.end(), [](auto& kv) { return kv.second >= 2; }));
      all.insert(all.end(), b.begin(), b.end());
    }
    auto expect = flatten(p);
    std::sort(all.begin(), all.end());
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(all, expect);
  }
}

TEST(DatasetTable, Values) {
  EXPECT_EQ(dataset_spec("mnist").tau_per_class, 1600u);
  EXPECT_EQ(dataset_spec("mnist").nu_per_class, 600u);
  EXPECT_EQ(dataset_spec("mnist").k_prime, 100u);
  EXPECT_EQ(dataset_spec("omniglot").tau_per_class, 15u);
  EXPECT_EQ(dataset_spec("omniglot").n_values, (std::vector<std::size_t>{5, 10, 100, 1000}));
  EXPECT_EQ(dataset_spec("isolet").k_values, (std::vector<std::size_t>{1, 10, 50, 100, 200}));
  EXPECT_EQ(dataset_spec("tinyimagenet").nu_per_class, 200u);
  EXPECT_EQ(known_datasets().size(), 4u);
  EXPECT_THROW(dataset_spec("cifar"), DataError);
  EXPECT_EQ(split_config_for(dataset_spec("mnist"), 5, 10, 0, 0).query_per_class, 2000u);
}
