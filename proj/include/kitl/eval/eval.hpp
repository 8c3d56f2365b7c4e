#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kitl/numcore/tensor.hpp"

namespace kitl::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunResult {
  std::string dataset;
  std::string method;
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t replication = 0;
  double accuracy = 0.0;  // correct / num_queries
  std::size_t num_queries = 0;
  double wall_seconds = 0.0;
};

struct ConditionKey {
  std::string dataset;
  std::string method;
  std::size_t n = 0;
  std::size_t k = 0;

  auto operator<=>(const ConditionKey&) const = default;
};

inline ConditionKey condition_of(const RunResult& r) { return {r.dataset, r.method, r.n, r.k}; }

struct ConditionSummary {
  double mean = 0.0;
  std::optional<double> sem;  // absent for a single replication
  std::size_t count = 0;

  bool singleton() const { return count < 2; }
};

double accuracy(std::span<const int> predictions, std::span<const int> truth);

// Fraction of queries whose r most cosine-similar support rows contain one of
// the query's class. Ties in similarity go to the lower support index.
double recall_at_r(const Tensor<float>& query_embeddings, std::span<const int> query_labels,
                   const Tensor<float>& support_embeddings, std::span<const int> support_labels,
                   std::size_t r);

// Mean and sample standard error per (dataset, method, n, k).
ConditionSummary summarize_values(std::span<const double> values);
std::map<ConditionKey, ConditionSummary> summarize(std::span<const RunResult> results);

enum class ComparisonSet { all_others, non_adapted_embeddings, adapted_non_embeddings };

std::string_view comparison_name(ComparisonSet set);
std::vector<ComparisonSet> comparison_sets();

// Methods keyed by name ("histloss", "adaptprotonet", ...) for one
// (dataset, n, k) condition. (err_other - err_adapted) / err_other, with err
// the best (lowest) error of each group. Empty when err_other is zero.
// Throws when either group has no member in `by_method`.
std::optional<double> error_reduction(const std::map<std::string, ConditionSummary>& by_method,
                                      ComparisonSet set);

struct ReductionRow {
  std::string dataset;
  std::size_t n = 0;
  std::size_t k = 0;
  ComparisonSet set = ComparisonSet::all_others;
  std::optional<double> reduction;
};

struct ReductionReport {
  std::vector<ReductionRow> rows;
  // Mean over the defined per-condition reductions of each set.
  std::map<ComparisonSet, double> mean;
  std::map<ComparisonSet, std::size_t> conditions;
};

// Every (dataset, n, k) condition with k > 1 that has at least one adapted
// embedding method and one member of the comparison set.
ReductionReport error_reduction_report(const std::map<ConditionKey, ConditionSummary>& summaries);

// --- persistence --------------------------------------------------------------

inline constexpr std::string_view kResultsHeader =
    "dataset,method,n,k,replication,accuracy,num_queries,wall_seconds";

std::string to_csv_row(const RunResult& r);
RunResult parse_csv_row(std::string_view line);

// Missing file reads as no results.
std::vector<RunResult> read_results_csv(const std::filesystem::path& path);
void write_results_csv(const std::filesystem::path& path, std::span<const RunResult> results);

std::string summary_json(const std::map<ConditionKey, ConditionSummary>& summaries);
void write_summary_json(const std::filesystem::path& path,
                        const std::map<ConditionKey, ConditionSummary>& summaries);

std::string reduction_csv(const ReductionReport& report);
void write_reduction_csv(const std::filesystem::path& path, const ReductionReport& report);

}  // namespace kitl::eval
