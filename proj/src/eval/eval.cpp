#include "kitl/eval/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace kitl::eval {
namespace {

const std::set<std::string> kAdapted = {"adapthistloss", "adaptprotonet"};

const std::set<std::string>& members(ComparisonSet set) {
  static const std::set<std::string> all = {"baseline", "weightadapt", "histloss", "protonet"};
  static const std::set<std::string> embeddings = {"histloss", "protonet"};
  static const std::set<std::string> non_embeddings = {"baseline", "weightadapt"};
  switch (set) {
    case ComparisonSet::all_others: return all;
    case ComparisonSet::non_adapted_embeddings: return embeddings;
    case ComparisonSet::adapted_non_embeddings: return non_embeddings;
  }
  throw EvalError("unknown comparison set");
}

std::optional<double> best_error(const std::map<std::string, ConditionSummary>& by_method,
                                 const std::set<std::string>& names) {
  std::optional<double> best;
  for (const auto& name : names) {
    auto it = by_method.find(name);
    if (it == by_method.end()) continue;
    const double err = 1.0 - it->second.mean;
    if (!best || err < *best) best = err;
  }
  return best;
}

Tensor<float> unit_rows(const Tensor<float>& x, std::string_view what) {
  if (x.rank() != 2 || x.dim(0) == 0) {
    throw EvalError(std::string(what) + ": expected a non-empty matrix, got " + shape_str(x.shape()));
  }
  Tensor<float> out = x;
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += double(x[i * d + j]) * x[i * d + j];
    const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = static_cast<float>(x[i * d + j] * inv);
  }
  return out;
}

template <typename V>
V parse_number(std::string_view field, std::string_view column, std::string_view line) {
  V v{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw EvalError("results row '" + std::string(line) + "': bad " + std::string(column) + " '" +
                    std::string(field) + "'");
  }
  return v;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw EvalError("cannot write " + tmp);
    out << text;
    if (!out) throw EvalError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

double accuracy(std::span<const int> predictions, std::span<const int> truth) {
  if (predictions.empty()) throw EvalError("accuracy of an empty prediction list");
  if (predictions.size() != truth.size()) {
    throw EvalError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(truth.size()) + " labels");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += predictions[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(truth.size());
}

double recall_at_r(const Tensor<float>& query_embeddings, std::span<const int> query_labels,
                   const Tensor<float>& support_embeddings, std::span<const int> support_labels,
                   std::size_t r) {
  if (r == 0) throw EvalError("recall@r needs r >= 1");
  const Tensor<float> q = unit_rows(query_embeddings, "recall@r queries");
  const Tensor<float> s = unit_rows(support_embeddings, "recall@r support");
  if (q.dim(1) != s.dim(1)) throw EvalError("recall@r: embedding widths differ");
  if (query_labels.size() != q.dim(0) || support_labels.size() != s.dim(0)) {
    throw EvalError("recall@r: one label per embedding row required");
  }
  if (r > s.dim(0)) {
    throw EvalError("recall@" + std::to_string(r) + " exceeds the support size " +
                    std::to_string(s.dim(0)));
  }
  const std::size_t d = q.dim(1), m = s.dim(0);
  std::size_t hits = 0;
  std::vector<double> sims(m);
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < q.dim(0); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double v = 0.0;
      for (std::size_t t = 0; t < d; ++t) v += double(q[i * d + t]) * s[j * d + t];
      sims[j] = v;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + r, order.end(), [&](std::size_t a, std::size_t b) {
      return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
    });
    hits += std::any_of(order.begin(), order.begin() + r,
                        [&](std::size_t j) { return support_labels[j] == query_labels[i]; });
  }
  return static_cast<double>(hits) / static_cast<double>(q.dim(0));
}

ConditionSummary summarize_values(std::span<const double> values) {
  if (values.empty()) throw EvalError("summary of no values");
  // Sorted accumulation makes the summary independent of replication order.
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  ConditionSummary s;
  s.count = v.size();
  long double sum = 0;
  for (double x : v) sum += x;
  s.mean = static_cast<double>(sum / v.size());
  if (v.size() >= 2) {
    long double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    const double sd = std::sqrt(static_cast<double>(ss / (v.size() - 1)));
    s.sem = sd / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

std::map<ConditionKey, ConditionSummary> summarize(std::span<const RunResult> results) {
  std::map<ConditionKey, std::vector<double>> grouped;
  for (const auto& r : results) grouped[condition_of(r)].push_back(r.accuracy);
  std::map<ConditionKey, ConditionSummary> out;
  for (const auto& [key, values] : grouped) out.emplace(key, summarize_values(values));
  return out;
}

std::string_view comparison_name(ComparisonSet set) {
  switch (set) {
    case ComparisonSet::all_others: return "all_others";
    case ComparisonSet::non_adapted_embeddings: return "non_adapted_embeddings";
    case ComparisonSet::adapted_non_embeddings: return "adapted_non_embeddings";
  }
  throw EvalError("unknown comparison set");
}

std::vector<ComparisonSet> comparison_sets() {
  return {ComparisonSet::all_others, ComparisonSet::non_adapted_embeddings,
          ComparisonSet::adapted_non_embeddings};
}

std::optional<double> error_reduction(const std::map<std::string, ConditionSummary>& by_method,
                                      ComparisonSet set) {
  const auto adapted = best_error(by_method, kAdapted);
  if (!adapted) throw EvalError("error reduction needs an adapted embedding method");
  const auto other = best_error(by_method, members(set));
  if (!other) {
    throw EvalError("error reduction needs a member of " + std::string(comparison_name(set)));
  }
  if (*other == 0.0) return std::nullopt;
  return (*other - *adapted) / *other;
}

ReductionReport error_reduction_report(const std::map<ConditionKey, ConditionSummary>& summaries) {
  std::map<std::tuple<std::string, std::size_t, std::size_t>, std::map<std::string, ConditionSummary>>
      conditions;
  for (const auto& [key, s] : summaries) {
    if (key.k > 1) conditions[{key.dataset, key.n, key.k}][key.method] = s;
  }
  ReductionReport report;
  std::map<ComparisonSet, long double> sums;
  for (const auto& [cond, by_method] : conditions) {
    if (!best_error(by_method, kAdapted)) continue;
    for (ComparisonSet set : comparison_sets()) {
      if (!best_error(by_method, members(set))) continue;
      ReductionRow row{std::get<0>(cond), std::get<1>(cond), std::get<2>(cond), set,
                       error_reduction(by_method, set)};
      if (row.reduction) {
        sums[set] += *row.reduction;
        ++report.conditions[set];
      }
      report.rows.push_back(row);
    }
  }
  for (const auto& [set, total] : sums) {
    report.mean[set] = static_cast<double>(total / report.conditions[set]);
  }
  return report;
}

std::string to_csv_row(const RunResult& r) {
  return r.dataset + ',' + r.method + ',' + std::to_string(r.n) + ',' + std::to_string(r.k) + ',' +
         std::to_string(r.replication) + ',' + format_double(r.accuracy) + ',' +
         std::to_string(r.num_queries) + ',' + format_double(r.wall_seconds);
}

RunResult parse_csv_row(std::string_view line) {
  std::vector<std::string_view> f;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = line.find(',', start);
    f.push_back(line.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  if (f.size() != 8) {
    throw EvalError("results row '" + std::string(line) + "': expected 8 fields, found " +
                    std::to_string(f.size()));
  }
  RunResult r;
  r.dataset = std::string(f[0]);
  r.method = std::string(f[1]);
  r.n = parse_number<std::size_t>(f[2], "n", line);
  r.k = parse_number<std::size_t>(f[3], "k", line);
  r.replication = parse_number<std::size_t>(f[4], "replication", line);
  r.accuracy = parse_number<double>(f[5], "accuracy", line);
  r.num_queries = parse_number<std::size_t>(f[6], "num_queries", line);
  r.wall_seconds = parse_number<double>(f[7], "wall_seconds", line);
  if (r.accuracy < 0.0 || r.accuracy > 1.0) {
    throw EvalError("results row '" + std::string(line) + "': accuracy outside [0, 1]");
  }
  return r;
}

std::vector<RunResult> read_results_csv(const std::filesystem::path& path) {
  std::vector<RunResult> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      if (line != kResultsHeader) throw EvalError(path.string() + ": unexpected header '" + line + "'");
      header = false;
      continue;
    }
    out.push_back(parse_csv_row(line));
  }
  return out;
}

void write_results_csv(const std::filesystem::path& path, std::span<const RunResult> results) {
  std::string text(kResultsHeader);
  text += '\n';
  for (const auto& r : results) text += to_csv_row(r) + '\n';
  write_text(path, text);
}

std::string summary_json(const std::map<ConditionKey, ConditionSummary>& summaries) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [key, s] : summaries) {
    const std::string name =
        key.dataset + '/' + key.method + "/n=" + std::to_string(key.n) + "/k=" + std::to_string(key.k);
    nlohmann::ordered_json entry = {{"dataset", key.dataset}, {"method", key.method},
                                    {"n", key.n},             {"k", key.k},
                                    {"mean", s.mean},         {"count", s.count}};
    if (s.sem) {
      entry["sem"] = *s.sem;
    } else {
      entry["sem"] = nullptr;
      entry["flag"] = "single replication; no standard error";
    }
    doc[name] = entry;
  }
  return doc.dump(2) + '\n';
}

void write_summary_json(const std::filesystem::path& path,
                        const std::map<ConditionKey, ConditionSummary>& summaries) {
  write_text(path, summary_json(summaries));
}

std::string reduction_csv(const ReductionReport& report) {
  std::string text = "dataset,n,k,comparison_set,reduction\n";
  for (const auto& row : report.rows) {
    text += row.dataset + ',' + std::to_string(row.n) + ',' + std::to_string(row.k) + ',' +
            std::string(comparison_name(row.set)) + ',' +
            (row.reduction ? format_double(*row.reduction) : std::string("undefined")) + '\n';
  }
  for (const auto& [set, mean] : report.mean) {
    text += "mean,,," + std::string(comparison_name(set)) + ',' + format_double(mean) + '\n';
  }
  return text;
}

void write_reduction_csv(const std::filesystem::path& path, const ReductionReport& report) {
  write_text(path, reduction_csv(report));
}

}  // namespace kitl::eval
