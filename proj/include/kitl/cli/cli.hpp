#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kitl/numcore/graph.hpp"
#include "kitl/protocols/protocols.hpp"

namespace kitl::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentGrid {
  std::string dataset;
  std::vector<protocols::Method> methods;
  std::vector<std::size_t> n_values;
  std::vector<std::size_t> k_values;
  std::size_t replications = 10;
  std::uint64_t base_seed = 0;
  protocols::SourceMode mode = protocols::SourceMode::restricted;
  bool augment_rotations = false;
  // Fixed source/target class assignment (MNIST digits 0-4 / 5-9).
  bool fixed_split = false;

  bool operator==(const ExperimentGrid&) const = default;
};

// Method-independent protocol settings plus per-method learning rates.
struct ProtocolSettings {
  std::size_t patience = 10;
  double adapt_tolerance = 1e-4;
  std::size_t adapt_window = 10;
  std::size_t max_adapt_epochs = 1000;
  std::size_t max_source_checks = 1000;
  std::size_t steps_per_check = 0;
  std::size_t batch_size = 64;
  std::size_t full_batch_limit = 512;
  std::size_t validation_episodes = 10;
  std::size_t episode_classes = 60;
  std::size_t source_classes = 0;  // episodic mode; 0 keeps N_src = n
  std::size_t k_prime = 5;
  std::size_t source_query = 15;
  int bins = 200;
  std::size_t eval_chunk = 256;
  std::map<protocols::Method, float> lr_source;
  std::map<protocols::Method, float> lr_adapt;

  bool operator==(const ProtocolSettings&) const = default;
};

struct Paths {
  std::filesystem::path data_dir;
  std::filesystem::path dataset_file;
  std::filesystem::path output_dir;

  bool operator==(const Paths&) const = default;
};

struct ExperimentConfig {
  ExperimentGrid grid;
  ProtocolSettings protocol;
  Paths paths;

  bool operator==(const ExperimentConfig&) const = default;
};

// Text with [grid], [protocol] and [paths] sections of `key = value` lines;
// `#` starts a comment. Only grid.dataset is required. `default_data_dir`
// stands in for an absent paths.data_dir.
ExperimentConfig parse_config_text(std::string_view text, std::string_view origin = "<config>",
                                   const std::filesystem::path& default_data_dir = "data");

// Reads a file; the default data directory is $KITL_DATA_DIR or "data".
ExperimentConfig parse_config(const std::filesystem::path& path);

// Writes every setting explicitly; parsing the result gives back `config`.
std::string serialize_config(const ExperimentConfig& config);

protocols::ProtocolConfig protocol_for(const ExperimentConfig& config, protocols::Method method);

std::filesystem::path default_data_dir();

// --- grid ---------------------------------------------------------------------

struct GridOptions {
  std::size_t workers = 1;
  // Keep rows already present in the results file and skip their conditions.
  bool resume = false;
  std::ostream* progress = nullptr;
};

struct GridOutcome {
  std::size_t completed = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;

  int exit_status() const { return failed == 0 ? 0 : 1; }
};

std::filesystem::path results_path(const ExperimentConfig& config);

// Loads the dataset named by the config (rotation-augmented when asked).
data::Dataset load_dataset(const ExperimentConfig& config);

// Runs every (method, n, k, replication) of the grid, writing
// results.csv, summary.json, error_reduction.csv, logs/ and manifests/
// below paths.output_dir.
GridOutcome run_grid(const ExperimentConfig& config, const GridOptions& options);

// Same, over an already loaded dataset.
GridOutcome run_grid(const ExperimentConfig& config, const data::Dataset& dataset,
                     const GridOptions& options);

// Summary JSON and error-reduction CSV next to a results CSV.
void write_reports(const std::filesystem::path& results_csv, const std::filesystem::path& summary_json,
                   const std::filesystem::path& reduction_csv);

// --- gradient checks ------------------------------------------------------------

inline constexpr double kGradcheckEpsilon = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::size_t unresolved_zeros = 0;
  // Op nodes whose isolated check fails; filled only for failing cases.
  std::vector<std::string> failing_ops;
};

struct GradcheckReport {
  std::vector<GradcheckCase> cases;
  bool pass() const;
  std::string text() const;
};

// Checks the scalar output of `graph` against every leaf in `leaves`.
// Leaves listed in `structurally_zero` must have an analytic gradient below
// 1e-12 instead (batchnorm-absorbed biases).
GradcheckCase check_case(std::string name, Graph<double>& graph, const std::vector<std::string>& leaves,
                         const std::vector<std::string>& structurally_zero, std::size_t max_coords,
                         std::uint64_t seed);

// Histogram loss, prototypical loss and cross-entropy through each of the
// four architectures, at `seeds` random points starting from `seed`.
GradcheckReport gradcheck_suite(std::uint64_t seed = 0, std::size_t seeds = 5);

}  // namespace kitl::cli
