#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "kitl/cli/cli.hpp"

namespace kitl::cli {

using protocols::Method;

namespace {

struct Entry {
  std::string value;
  std::size_t line = 0;
};

using Section = std::map<std::string, Entry>;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

class Reader {
 public:
  Reader(std::string_view origin, std::map<std::string, Section> sections)
      : origin_(origin), sections_(std::move(sections)) {}

  std::optional<Entry> take(const std::string& section, const std::string& key) {
    auto& s = sections_[section];
    auto it = s.find(key);
    if (it == s.end()) return std::nullopt;
    Entry e = it->second;
    s.erase(it);
    return e;
  }

  [[noreturn]] void fail(const Entry& e, const std::string& message) const {
    throw ConfigError(std::string(origin_) + ":" + std::to_string(e.line) + ": " + message);
  }

  template <typename V>
  V number(const Entry& e, std::string_view text, const std::string& key) const {
    V v{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      fail(e, key + ": '" + std::string(text) + "' is not a valid number");
    }
    return v;
  }

  template <typename V>
  void assign(const std::string& section, const std::string& key, V& target) {
    if (auto e = take(section, key)) target = number<V>(*e, e->value, key);
  }

  template <typename V>
  std::optional<std::vector<V>> list(const std::string& section, const std::string& key) {
    auto e = take(section, key);
    if (!e) return std::nullopt;
    std::vector<V> out;
    std::string_view rest = e->value;
    while (true) {
      const std::size_t comma = rest.find(',');
      const std::string_view item = trim(rest.substr(0, comma));
      if (item.empty()) fail(*e, key + ": empty list item");
      if constexpr (std::is_same_v<V, std::string>) {
        out.emplace_back(item);
      } else {
        out.push_back(number<V>(*e, item, key));
      }
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    return out;
  }

  // Anything not consumed is an unknown key.
  void reject_leftovers() const {
    for (const auto& [name, section] : sections_) {
      if (!section.empty()) {
        const auto& [key, e] = *section.begin();
        fail(e, "unknown key '" + key + "' in [" + name + "]");
      }
    }
  }

 private:
  std::string_view origin_;
  std::map<std::string, Section> sections_;
};

std::map<std::string, Section> tokenize(std::string_view text, std::string_view origin) {
  static const std::set<std::string> known = {"grid", "protocol", "paths"};
  std::map<std::string, Section> sections;
  std::string current;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto where = [&] { return std::string(origin) + ":" + std::to_string(line_no) + ": "; };
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where() + "malformed section header");
      current = std::string(trim(line.substr(1, line.size() - 2)));
      if (!known.contains(current)) {
        throw ConfigError(where() + "unknown section [" + current + "] (expected grid, protocol or paths)");
      }
      sections[current];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where() + "expected key = value");
    if (current.empty()) throw ConfigError(where() + "key outside a section");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where() + "empty key");
    if (!sections[current].emplace(key, Entry{value, line_no}).second) {
      throw ConfigError(where() + "duplicate key '" + key + "' in [" + current + "]");
    }
  }
  return sections;
}

std::string join_numbers(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out;
}

template <typename V>
std::string shortest(V v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

bool parse_bool(const Reader& r, const Entry& e, const std::string& key) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  r.fail(e, key + ": expected true or false, got '" + e.value + "'");
}

}  // namespace

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("KITL_DATA_DIR"); env && *env) return env;
  return "data";
}

ExperimentConfig parse_config_text(std::string_view text, std::string_view origin,
                                   const std::filesystem::path& default_data) {
  Reader r(origin, tokenize(text, origin));
  ExperimentConfig cfg;
  ExperimentGrid& grid = cfg.grid;

  const auto dataset = r.take("grid", "dataset");
  if (!dataset) throw ConfigError(std::string(origin) + ": [grid] dataset is required");
  const data::DatasetSpec* spec = nullptr;
  try {
    spec = &data::dataset_spec(dataset->value);
  } catch (const data::DataError& e) {
    r.fail(*dataset, e.what());
  }
  grid.dataset = spec->name;

  grid.methods = protocols::all_methods();
  if (auto e = r.take("grid", "methods")) {
    grid.methods.clear();
    Reader sub(origin, {{"grid", {{"methods", *e}}}});
    const auto names = *sub.list<std::string>("grid", "methods");
    for (const auto& name : names) {
      try {
        grid.methods.push_back(protocols::parse_method(name));
      } catch (const protocols::ProtocolError& err) {
        r.fail(*e, err.what());
      }
    }
  }

  auto check_values = [&](const char* key, const std::vector<std::size_t>& allowed,
                          std::vector<std::size_t>& target) {
    auto e = r.take("grid", key);
    if (!e) {
      target = allowed;
      return;
    }
    Reader sub(origin, {{"grid", {{key, *e}}}});
    target = *sub.list<std::size_t>("grid", key);
    for (std::size_t v : target) {
      if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
        r.fail(*e, std::string(key) + " = " + std::to_string(v) + " is not a valid " + spec->name +
                       " condition (allowed " + key + ": " + join_numbers(allowed) + ")");
      }
    }
  };
  check_values("n", spec->n_values, grid.n_values);
  check_values("k", spec->k_values, grid.k_values);
  r.assign("grid", "replications", grid.replications);
  if (grid.replications == 0) throw ConfigError(std::string(origin) + ": replications must be >= 1");
  r.assign("grid", "base_seed", grid.base_seed);
  grid.mode = protocols::SourceMode::restricted;
  if (auto e = r.take("grid", "mode")) {
    try {
      grid.mode = protocols::parse_source_mode(e->value);
    } catch (const protocols::ProtocolError& err) {
      r.fail(*e, err.what());
    }
  }
  grid.augment_rotations = grid.dataset == "omniglot";
  if (auto e = r.take("grid", "augment_rotations")) grid.augment_rotations = parse_bool(r, *e, "augment_rotations");
  grid.fixed_split = spec->fixed_split;
  if (auto e = r.take("grid", "fixed_split")) grid.fixed_split = parse_bool(r, *e, "fixed_split");

  ProtocolSettings& p = cfg.protocol;
  const protocols::ProtocolConfig base = protocols::default_config(Method::histloss, grid.dataset);
  p.patience = base.patience;
  p.adapt_tolerance = base.adapt_tolerance;
  p.adapt_window = base.adapt_window;
  p.max_adapt_epochs = base.max_adapt_epochs;
  p.max_source_checks = base.max_source_checks;
  p.steps_per_check = base.steps_per_check;
  p.batch_size = base.batch_size;
  p.full_batch_limit = base.full_batch_limit;
  p.validation_episodes = base.validation_episodes;
  p.episode_classes = base.episode_classes;
  p.source_classes = base.source_classes;
  p.k_prime = base.k_prime;
  p.source_query = base.source_query;
  p.bins = base.bins;
  p.eval_chunk = base.eval_chunk;
  r.assign("protocol", "patience", p.patience);
  r.assign("protocol", "adapt_tolerance", p.adapt_tolerance);
  r.assign("protocol", "adapt_window", p.adapt_window);
  r.assign("protocol", "max_adapt_epochs", p.max_adapt_epochs);
  r.assign("protocol", "max_source_checks", p.max_source_checks);
  r.assign("protocol", "steps_per_check", p.steps_per_check);
  r.assign("protocol", "batch_size", p.batch_size);
  r.assign("protocol", "full_batch_limit", p.full_batch_limit);
  r.assign("protocol", "validation_episodes", p.validation_episodes);
  r.assign("protocol", "episode_classes", p.episode_classes);
  r.assign("protocol", "source_classes", p.source_classes);
  r.assign("protocol", "k_prime", p.k_prime);
  r.assign("protocol", "source_query", p.source_query);
  r.assign("protocol", "bins", p.bins);
  r.assign("protocol", "eval_chunk", p.eval_chunk);
  if (p.batch_size == 0 || p.k_prime == 0 || p.source_query == 0 || p.patience == 0 ||
      p.validation_episodes == 0 || p.eval_chunk == 0 || p.bins < 2) {
    throw ConfigError(std::string(origin) +
                      ": batch_size, k_prime, source_query, patience, validation_episodes and "
                      "eval_chunk must be positive and bins >= 2");
  }
  for (Method m : protocols::all_methods()) {
    const auto defaults = protocols::default_config(m, grid.dataset);
    const std::string name(protocols::method_name(m));
    p.lr_source[m] = defaults.lr_source;
    p.lr_adapt[m] = defaults.lr_adapt;
    r.assign("protocol", "lr_source." + name, p.lr_source[m]);
    r.assign("protocol", "lr_adapt." + name, p.lr_adapt[m]);
  }

  cfg.paths.data_dir = default_data;
  if (auto e = r.take("paths", "data_dir")) cfg.paths.data_dir = e->value;
  cfg.paths.dataset_file = cfg.paths.data_dir / (grid.dataset + ".kitl");
  if (auto e = r.take("paths", "dataset_file")) cfg.paths.dataset_file = e->value;
  cfg.paths.output_dir = std::filesystem::path("results") / grid.dataset;
  if (auto e = r.take("paths", "output_dir")) cfg.paths.output_dir = e->value;

  r.reject_leftovers();
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string(), default_data_dir());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  const ExperimentGrid& g = cfg.grid;
  out << "[grid]\n";
  out << "dataset = " << g.dataset << '\n';
  out << "methods = ";
  for (std::size_t i = 0; i < g.methods.size(); ++i) out << (i ? ", " : "") << protocols::method_name(g.methods[i]);
  out << '\n';
  out << "n = " << join_numbers(g.n_values) << '\n';
  out << "k = " << join_numbers(g.k_values) << '\n';
  out << "replications = " << g.replications << '\n';
  out << "base_seed = " << g.base_seed << '\n';
  out << "mode = " << protocols::source_mode_name(g.mode) << '\n';
  out << "augment_rotations = " << (g.augment_rotations ? "true" : "false") << '\n';
  out << "fixed_split = " << (g.fixed_split ? "true" : "false") << '\n';

  const ProtocolSettings& p = cfg.protocol;
  out << "\n[protocol]\n";
  out << "patience = " << p.patience << '\n';
  out << "adapt_tolerance = " << shortest(p.adapt_tolerance) << '\n';
  out << "adapt_window = " << p.adapt_window << '\n';
  out << "max_adapt_epochs = " << p.max_adapt_epochs << '\n';
  out << "max_source_checks = " << p.max_source_checks << '\n';
  out << "steps_per_check = " << p.steps_per_check << '\n';
  out << "batch_size = " << p.batch_size << '\n';
  out << "full_batch_limit = " << p.full_batch_limit << '\n';
  out << "validation_episodes = " << p.validation_episodes << '\n';
  out << "episode_classes = " << p.episode_classes << '\n';
  out << "source_classes = " << p.source_classes << '\n';
  out << "k_prime = " << p.k_prime << '\n';
  out << "source_query = " << p.source_query << '\n';
  out << "bins = " << p.bins << '\n';
  out << "eval_chunk = " << p.eval_chunk << '\n';
  for (const auto& [m, lr] : p.lr_source) {
    out << "lr_source." << protocols::method_name(m) << " = " << shortest(lr) << '\n';
  }
  for (const auto& [m, lr] : p.lr_adapt) {
    out << "lr_adapt." << protocols::method_name(m) << " = " << shortest(lr) << '\n';
  }

  out << "\n[paths]\n";
  out << "data_dir = " << cfg.paths.data_dir.string() << '\n';
  out << "dataset_file = " << cfg.paths.dataset_file.string() << '\n';
  out << "output_dir = " << cfg.paths.output_dir.string() << '\n';
  return out.str();
}

protocols::ProtocolConfig protocol_for(const ExperimentConfig& cfg, Method method) {
  protocols::ProtocolConfig out = protocols::default_config(method, cfg.grid.dataset);
  const ProtocolSettings& p = cfg.protocol;
  out.lr_source = p.lr_source.at(method);
  out.lr_adapt = p.lr_adapt.at(method);
  out.patience = p.patience;
  out.adapt_tolerance = p.adapt_tolerance;
  out.adapt_window = p.adapt_window;
  out.max_adapt_epochs = p.max_adapt_epochs;
  out.max_source_checks = p.max_source_checks;
  out.steps_per_check = p.steps_per_check;
  out.batch_size = p.batch_size;
  out.full_batch_limit = p.full_batch_limit;
  out.validation_episodes = p.validation_episodes;
  out.mode = cfg.grid.mode;
  out.episode_classes = p.episode_classes;
  out.source_classes = p.source_classes;
  out.k_prime = p.k_prime;
  out.source_query = p.source_query;
  out.bins = p.bins;
  out.eval_chunk = p.eval_chunk;
  return out;
}

}  // namespace kitl::cli
