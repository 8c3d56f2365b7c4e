#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "kitl/datapipe/datapipe.hpp"

namespace kitl::data {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t base_seed, std::uint64_t replication,
                          std::string_view purpose, std::uint64_t salt) {
  std::uint64_t h = splitmix64(base_seed);
  h = splitmix64(h ^ replication);
  h = splitmix64(h ^ fnv1a(purpose));
  return splitmix64(h ^ salt);
}

namespace {

// Fisher-Yates with an explicit uniform draw so results do not depend on a
// standard library's shuffle implementation.
template <typename V>
void shuffle(std::vector<V>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<std::size_t> permuted(std::vector<std::size_t> v, std::uint64_t seed) {
  Rng rng(seed);
  shuffle(v, rng);
  return v;
}

// Picks `n` classes from whole groups taken in shuffled order, skipping
// groups in `taken`. Returns the chosen classes and marks the used groups.
std::vector<int> pick_classes(const Dataset& ds, const std::vector<int>& group_order,
                              std::set<int>& taken, std::size_t n, std::uint64_t seed) {
  std::map<int, std::vector<int>> members;
  for (const auto& [c, g] : ds.groups) members[g].push_back(c);
  std::vector<int> pool;
  for (int g : group_order) {
    if (pool.size() >= n) break;
    if (taken.contains(g)) continue;
    taken.insert(g);
    pool.insert(pool.end(), members[g].begin(), members[g].end());
  }
  if (pool.size() < n) {
    throw DataError(ds.name + ": not enough classes left for a domain of " + std::to_string(n) +
                    " disjoint classes (dataset has " + std::to_string(ds.num_classes()) + ")");
  }
  Rng rng(seed);
  shuffle(pool, rng);
  pool.resize(n);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

std::vector<std::size_t> flatten(const ClassPartition& partition) {
  std::vector<std::size_t> out;
  for (const auto& [c, idx] : partition) out.insert(out.end(), idx.begin(), idx.end());
  return out;
}

DomainSplit make_domain_split(const Dataset& ds, const SplitConfig& cfg) {
  if (cfg.n == 0) throw DataError("split needs n >= 1");
  if (cfg.k == 0) throw DataError("split needs k >= 1");
  if (cfg.tau == 0) throw DataError("split needs tau >= 1");
  DomainSplit split;
  const std::uint64_t rep = cfg.replication;
  if (cfg.fixed_split) {
    if (cfg.n != 5) throw DataError("fixed digit split requires n = 5");
    for (int c = 0; c < 10; ++c) {
      if (!ds.classes.contains(c)) {
        throw DataError(ds.name + ": fixed digit split needs classes 0-9, missing " + std::to_string(c));
      }
      (c < 5 ? split.source_classes : split.target_classes).push_back(c);
    }
  } else {
    std::vector<int> groups;
    for (const auto& [c, g] : ds.groups) groups.push_back(g);
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    Rng rng(stream_seed(cfg.base_seed, rep, "domain-groups", cfg.n));
    shuffle(groups, rng);
    std::set<int> taken;
    if (cfg.n_source.value_or(cfg.n) == 0 || cfg.n_target.value_or(cfg.n) == 0) {
      throw DataError("split needs at least one class per domain");
    }
    const std::size_t n_source = cfg.n_source.value_or(cfg.n);
    const std::size_t n_target = cfg.n_target.value_or(cfg.n);
    split.source_classes = pick_classes(ds, groups, taken, n_source,
                                        stream_seed(cfg.base_seed, rep, "source-classes", n_source));
    split.target_classes = pick_classes(ds, groups, taken, n_target,
                                        stream_seed(cfg.base_seed, rep, "target-classes", n_target));
  }

  for (int c : split.source_classes) {
    const auto perm = permuted(ds.classes.at(c),
                               stream_seed(cfg.base_seed, rep, "source-instances", static_cast<std::uint64_t>(c)));
    if (perm.size() <= cfg.tau) {
      throw DataError(ds.name + ": source class " + std::to_string(c) + " has " +
                      std::to_string(perm.size()) + " instances, needs more than tau = " +
                      std::to_string(cfg.tau));
    }
    const std::size_t valid = std::min(cfg.nu, perm.size() - cfg.tau);
    split.source_train[c].assign(perm.begin(), perm.begin() + cfg.tau);
    split.source_valid[c].assign(perm.begin() + cfg.tau, perm.begin() + cfg.tau + valid);
  }

  for (int c : split.target_classes) {
    const auto perm = permuted(ds.classes.at(c),
                               stream_seed(cfg.base_seed, rep, "target-instances", static_cast<std::uint64_t>(c)));
    if (perm.size() <= cfg.k) {
      throw DataError(ds.name + ": target class " + std::to_string(c) + " has " +
                      std::to_string(perm.size()) + " instances, needs more than k = " +
                      std::to_string(cfg.k));
    }
    std::size_t query_begin = cfg.k;
    if (cfg.query_per_class) {
      if (cfg.k + *cfg.query_per_class > perm.size()) {
        throw DataError(ds.name + ": target class " + std::to_string(c) + " cannot hold k = " +
                        std::to_string(cfg.k) + " support plus " +
                        std::to_string(*cfg.query_per_class) + " queries");
      }
      query_begin = perm.size() - *cfg.query_per_class;
    }
    split.target_support[c].assign(perm.begin(), perm.begin() + cfg.k);
    split.target_query[c].assign(perm.begin() + query_begin, perm.end());
  }
  return split;
}

std::string split_manifest(const DomainSplit& split) {
  std::ostringstream out;
  auto classes = [&](std::string_view name, const std::vector<int>& ids) {
    out << name;
    for (int c : ids) out << ' ' << c;
    out << '\n';
  };
  auto partition = [&](std::string_view name, const ClassPartition& p) {
    for (const auto& [c, idx] : p) {
      out << name << ' ' << c << ' ' << idx.size() << ':';
      for (std::size_t i : idx) out << ' ' << i;
      out << '\n';
    }
  };
  out << "# kitl split manifest v1\n";
  classes("source_classes", split.source_classes);
  classes("target_classes", split.target_classes);
  partition("source_train", split.source_train);
  partition("source_valid", split.source_valid);
  partition("target_support", split.target_support);
  partition("target_query", split.target_query);
  return out.str();
}

void write_split_manifest(const std::filesystem::path& path, const DomainSplit& split) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << split_manifest(split);
}

AdaptationSplit split_support_for_adaptation(const ClassPartition& support, std::size_t k,
                                             std::uint64_t seed) {
  if (k < 2) {
    throw DataError("adaptation split needs k >= 2: with k = 1 there is no query instance");
  }
  AdaptationSplit out;
  for (const auto& [c, idx] : support) {
    if (idx.size() != k) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " support instances, expected k = " + std::to_string(k));
    }
    const auto perm = permuted(idx, splitmix64(seed ^ static_cast<std::uint64_t>(c)));
    const std::size_t half = (k + 1) / 2;
    out.support[c].assign(perm.begin(), perm.begin() + half);
    out.query[c].assign(perm.begin() + half, perm.end());
  }
  return out;
}

Episode sample_episode(const ClassPartition& pool, std::size_t n_ep, std::size_t k_prime,
                       std::size_t q, Rng& rng) {
  if (n_ep == 0 || n_ep > pool.size()) {
    throw DataError("episode of " + std::to_string(n_ep) + " classes from a pool of " +
                    std::to_string(pool.size()));
  }
  if (k_prime == 0 || q == 0) throw DataError("episode needs k' >= 1 and q >= 1");
  std::vector<int> classes;
  for (const auto& [c, idx] : pool) classes.push_back(c);
  if (n_ep < classes.size()) {
    shuffle(classes, rng);
    classes.resize(n_ep);
    std::sort(classes.begin(), classes.end());
  }
  Episode ep;
  ep.classes = classes;
  for (int c : classes) {
    std::vector<std::size_t> idx = pool.at(c);
    if (idx.size() < k_prime + q) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " instances, episode needs k' + q = " + std::to_string(k_prime + q));
    }
    // Partial Fisher-Yates: the first k' + q slots become a uniform sample.
    for (std::size_t i = 0; i < k_prime + q; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    ep.support.insert(ep.support.end(), idx.begin(), idx.begin() + k_prime);
    ep.query.insert(ep.query.end(), idx.begin() + k_prime, idx.begin() + k_prime + q);
  }
  return ep;
}

std::vector<std::vector<std::size_t>> minibatches(std::span<const std::size_t> indices,
                                                  std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw DataError("batch size must be positive");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> balanced_minibatches(const ClassPartition& partition,
                                                           std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw DataError("batch size must be positive");
  std::vector<std::vector<std::size_t>> lists;
  std::vector<int> ids;
  for (const auto& [c, idx] : partition) {
    lists.push_back(idx);
    ids.push_back(c);
    shuffle(lists.back(), rng);
  }
  // Classes contribute two instances per turn, in a fresh random class order
  // each round, so any window of four holds a same-class pair.
  std::vector<std::size_t> order;
  std::size_t longest = 0;
  for (const auto& l : lists) longest = std::max(longest, l.size());
  std::vector<std::size_t> class_order(lists.size());
  for (std::size_t i = 0; i < class_order.size(); ++i) class_order[i] = i;
  for (std::size_t pos = 0; pos < longest; pos += 2) {
    shuffle(class_order, rng);
    for (std::size_t c : class_order) {
      for (std::size_t j = pos; j < std::min(pos + 2, lists[c].size()); ++j) order.push_back(lists[c][j]);
    }
  }
  std::map<std::size_t, int> label_of;
  for (std::size_t c = 0; c < lists.size(); ++c) {
    for (std::size_t i : lists[c]) label_of[i] = ids[c];
  }
  auto usable = [&](const std::vector<std::size_t>& b) {
    std::map<int, int> counts;
    for (std::size_t i : b) ++counts[label_of[i]];
    bool pair = false;
    for (const auto& [c, n] : counts) pair = pair || n >= 2;
    return pair && counts.size() >= 2;
  };
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    pending.insert(pending.end(), order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
    if (usable(pending)) batches.push_back(std::move(pending)), pending.clear();
  }
  if (!pending.empty()) {
    if (batches.empty()) {
      batches.push_back(std::move(pending));
    } else {
      batches.back().insert(batches.back().end(), pending.begin(), pending.end());
    }
  }
  return batches;
}

namespace {

const std::vector<DatasetSpec>& table() {
  static const std::vector<DatasetSpec> specs = {
      {"mnist", {5}, {1, 5, 10, 50, 100, 500, 1000}, 1600, 600, 100, true, 10000},
      {"omniglot", {5, 10, 100, 1000}, {1, 5, 10}, 15, 5, 5, false, std::nullopt},
      {"isolet", {5, 10}, {1, 10, 50, 100, 200}, 250, 50, 50, false, std::nullopt},
      {"tinyimagenet", {5, 10, 50}, {1, 10, 50, 100, 300}, 350, 200, 50, false, std::nullopt},
  };
  return specs;
}

}  // namespace

const DatasetSpec& dataset_spec(std::string_view name) {
  for (const auto& s : table()) {
    if (s.name == name) return s;
  }
  throw DataError("unknown dataset '" + std::string(name) +
                  "' (expected mnist, omniglot, isolet or tinyimagenet)");
}

std::vector<std::string> known_datasets() {
  std::vector<std::string> names;
  for (const auto& s : table()) names.push_back(s.name);
  return names;
}

SplitConfig split_config_for(const DatasetSpec& spec, std::size_t n, std::size_t k,
                             std::size_t replication, std::uint64_t base_seed) {
  SplitConfig cfg;
  cfg.n = n;
  cfg.k = k;
  cfg.tau = spec.tau_per_class;
  cfg.nu = spec.nu_per_class;
  cfg.replication = replication;
  cfg.base_seed = base_seed;
  cfg.fixed_split = spec.fixed_split;
  if (spec.query_total) cfg.query_per_class = *spec.query_total / n;
  return cfg;
}

}  // namespace kitl::data
