#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kitl/numcore/tensor.hpp"

namespace kitl::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ClassPartition = std::map<int, std::vector<std::size_t>>;

// Instance-major labelled data. `groups` maps every class id to a group id;
// classes of one group always land in the same domain. By default each
// class is its own group.
struct Dataset {
  std::string name;
  Tensor<float> features;  // [instances, input_shape...]
  std::vector<int> labels;
  ClassPartition classes;
  Shape input_shape;
  std::map<int, int> groups;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return classes.size(); }

  // Rows `indices` of features, in order.
  Tensor<float> gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

// Builds class lists and singleton groups; validates one label per row.
Dataset make_dataset(std::string name, Tensor<float> features, std::vector<int> labels);

enum class Format { idx, csv, kitl };

Format parse_format(std::string_view name);

// idx: an images file (the labels file is found by replacing "images-idx3"
// with "labels-idx1"), or a directory holding the MNIST train and t10k pairs,
// concatenated train first. Pixels are scaled to [0, 1].
// csv: float feature columns followed by one integer label column.
// kitl: the canonical tensor file plus its ".labels" companion.
Dataset ingest(const std::filesystem::path& path, Format format);

Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Dataset read_csv(const std::filesystem::path& path);
Dataset read_kitl(const std::filesystem::path& path);

// "KITL", u32 rank, u32 extents, float32 payload (all little-endian), and a
// sibling file with extension ".labels" holding int32 labels.
void write_kitl(const std::filesystem::path& path, const Dataset& dataset);

// Appends the three 90-degree rotations of every instance. The rotation r
// of class c gets id 4c + r and inherits c's group.
Dataset augment_rotations(const Dataset& dataset);

// Counter-clockwise quarter turn of one HWC image.
void rotate90(std::span<const float> in, std::span<float> out, std::size_t side,
              std::size_t channels);

// --- seeding ----------------------------------------------------------------

std::uint64_t fnv1a(std::string_view text);
std::uint64_t splitmix64(std::uint64_t x);

// Seed of a named random stream. Streams for different purposes, classes or
// replications are independent; adding a purpose never shifts another.
std::uint64_t stream_seed(std::uint64_t base_seed, std::uint64_t replication,
                          std::string_view purpose, std::uint64_t salt = 0);

using Rng = std::mt19937_64;

// --- splits -------------------------------------------------------------------

struct SplitConfig {
  std::size_t n = 5;
  std::size_t k = 1;
  std::size_t tau = 0;  // source train instances per class
  std::size_t nu = 0;   // source validation instances per class
  std::size_t replication = 0;
  std::uint64_t base_seed = 0;
  // MNIST convention: digits 0-4 are the source domain and 5-9 the target.
  bool fixed_split = false;
  // Per-class cap on target query instances, taken from the end of each
  // class permutation so the query set does not depend on k.
  std::optional<std::size_t> query_per_class;
  // Class counts of the two domains when they differ from n (episodic
  // source training draws n-way episodes from a larger source domain).
  std::optional<std::size_t> n_source;
  std::optional<std::size_t> n_target;
};

struct DomainSplit {
  std::vector<int> source_classes;  // ascending
  std::vector<int> target_classes;  // ascending
  ClassPartition source_train;
  ClassPartition source_valid;
  ClassPartition target_support;
  ClassPartition target_query;
};

// All indices of a partition, ascending class id then within-class order.
std::vector<std::size_t> flatten(const ClassPartition& partition);

// Source classes and instance splits depend on (base_seed, replication, n)
// only; the target support of size k is a prefix of a per-class permutation
// that does not depend on k.
DomainSplit make_domain_split(const Dataset& dataset, const SplitConfig& config);

// Audit text listing classes and indices of every partition.
std::string split_manifest(const DomainSplit& split);
void write_split_manifest(const std::filesystem::path& path, const DomainSplit& split);

struct AdaptationSplit {
  ClassPartition support;  // ceil(k/2) per class
  ClassPartition query;    // floor(k/2) per class
};

AdaptationSplit split_support_for_adaptation(const ClassPartition& support, std::size_t k,
                                             std::uint64_t seed);

struct Episode {
  std::vector<int> classes;          // ascending
  std::vector<std::size_t> support;  // k' per class, grouped by class
  std::vector<std::size_t> query;    // q per class, grouped by class
};

// Samples n_ep classes of `pool` (all of them, in order, when n_ep equals
// the pool size) and k' + q disjoint instances of each.
Episode sample_episode(const ClassPartition& pool, std::size_t n_ep, std::size_t k_prime,
                       std::size_t q, Rng& rng);

inline Episode sample_source_episode(const DomainSplit& split, std::size_t n_ep,
                                     std::size_t k_prime, std::size_t q, Rng& rng) {
  return sample_episode(split.source_train, n_ep, k_prime, q, rng);
}

// Shuffled partition of `indices` into consecutive batches.
std::vector<std::vector<std::size_t>> minibatches(std::span<const std::size_t> indices,
                                                  std::size_t batch_size, Rng& rng);

// Batches that interleave classes round-robin after per-class shuffles, so
// every batch holds at least two classes and two instances of one class
// whenever the partition allows it. A batch that would break this is grown
// with the following instances (or merged into its predecessor at the end).
std::vector<std::vector<std::size_t>> balanced_minibatches(const ClassPartition& partition,
                                                           std::size_t batch_size, Rng& rng);

// --- dataset table ----------------------------------------------------------------

struct DatasetSpec {
  std::string name;
  std::vector<std::size_t> n_values;
  std::vector<std::size_t> k_values;
  std::size_t tau_per_class;
  std::size_t nu_per_class;
  std::size_t k_prime;  // ProtoNet source-episode support per class
  bool fixed_split;
  std::optional<std::size_t> query_total;  // MNIST: 10000 target queries
};

const DatasetSpec& dataset_spec(std::string_view name);
std::vector<std::string> known_datasets();

SplitConfig split_config_for(const DatasetSpec& spec, std::size_t n, std::size_t k,
                             std::size_t replication, std::uint64_t base_seed);

}  // namespace kitl::data
