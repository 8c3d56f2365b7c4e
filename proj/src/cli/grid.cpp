#include <algorithm>
#include <atomic>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "kitl/cli/cli.hpp"
#include "kitl/eval/eval.hpp"

namespace kitl::cli {

using protocols::Method;

namespace {

namespace fs = std::filesystem;

struct Job {
  Method method;
  std::size_t n;
  std::size_t k;
  std::size_t replication;
};

std::size_t method_rank(std::string_view name) {
  const auto& all = protocols::all_methods();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (protocols::method_name(all[i]) == name) return i;
  }
  return all.size();
}

auto canonical_key(const eval::RunResult& r) {
  return std::make_tuple(r.dataset, r.n, r.k, method_rank(r.method), r.replication);
}

std::string run_tag(const std::string& dataset, const Job& j) {
  return dataset + "_" + std::string(protocols::method_name(j.method)) + "_n" + std::to_string(j.n) +
         "_k" + std::to_string(j.k) + "_r" + std::to_string(j.replication);
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Appends finished rows so an interrupted grid can resume.
class ResultsWriter {
 public:
  explicit ResultsWriter(const fs::path& path) : path_(path) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw std::runtime_error("cannot open " + path.string());
    if (fresh) out_ << eval::kResultsHeader << '\n' << std::flush;
  }

  void append(const eval::RunResult& r) {
    std::lock_guard lock(mutex_);
    out_ << eval::to_csv_row(r) << '\n' << std::flush;
  }

 private:
  fs::path path_;
  std::ofstream out_;
  std::mutex mutex_;
};

}  // namespace

fs::path results_path(const ExperimentConfig& config) { return config.paths.output_dir / "results.csv"; }

data::Dataset load_dataset(const ExperimentConfig& config) {
  data::Dataset ds = data::read_kitl(config.paths.dataset_file);
  ds.name = config.grid.dataset;
  if (config.grid.augment_rotations) {
    ds = data::augment_rotations(ds);
    ds.name = config.grid.dataset;
  }
  return ds;
}

GridOutcome run_grid(const ExperimentConfig& config, const GridOptions& options) {
  return run_grid(config, load_dataset(config), options);
}

GridOutcome run_grid(const ExperimentConfig& config, const data::Dataset& dataset,
                     const GridOptions& options) {
  const ExperimentGrid& grid = config.grid;
  data::DatasetSpec spec = data::dataset_spec(grid.dataset);
  spec.fixed_split = grid.fixed_split;
  const fs::path out_dir = config.paths.output_dir;
  const fs::path csv = results_path(config);
  fs::create_directories(out_dir / "logs");
  fs::create_directories(out_dir / "manifests");

  std::vector<eval::RunResult> existing;
  if (fs::exists(csv) && fs::file_size(csv) > 0) {
    if (!options.resume) {
      throw ConfigError(csv.string() + " already exists; pass --resume to continue it");
    }
    existing = eval::read_results_csv(csv);
    // Normalize the file so appends follow a complete line.
    eval::write_results_csv(csv, existing);
  }
  std::set<std::tuple<std::string, std::string, std::size_t, std::size_t, std::size_t>> done;
  for (const auto& r : existing) done.emplace(r.dataset, r.method, r.n, r.k, r.replication);

  write_text(out_dir / "config.ini", serialize_config(config));

  GridOutcome outcome;
  std::vector<Job> jobs;
  for (std::size_t rep = 0; rep < grid.replications; ++rep) {
    for (std::size_t n : grid.n_values) {
      for (Method m : grid.methods) {
        for (std::size_t k : grid.k_values) {
          if (done.contains({spec.name, std::string(protocols::method_name(m)), n, k, rep})) {
            ++outcome.skipped;
            continue;
          }
          jobs.push_back({m, n, k, rep});
        }
      }
    }
  }

  std::map<Method, protocols::ProtocolConfig> configs;
  for (Method m : grid.methods) configs[m] = protocol_for(config, m);

  ResultsWriter writer(csv);
  protocols::SourceCache cache;
  std::mutex progress_mutex;
  std::vector<eval::RunResult> fresh;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> completed{0};
  std::atomic<std::size_t> failed{0};

  auto report = [&](const std::string& line) {
    if (!options.progress) return;
    std::lock_guard lock(progress_mutex);
    *options.progress << line << '\n' << std::flush;
  };

  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      const std::string tag = run_tag(spec.name, job);
      std::ofstream log(out_dir / "logs" / (tag + ".log"), std::ios::trunc);
      try {
        auto output = protocols::run_replication(dataset, spec, job.method, job.n, job.k, job.replication,
                                                 grid.base_seed, configs.at(job.method), &cache);
        for (const auto& e : output.events) log << protocols::format_event(e) << '\n';
        write_text(out_dir / "manifests" /
                       (spec.name + "_n" + std::to_string(job.n) + "_k" + std::to_string(job.k) + "_r" +
                        std::to_string(job.replication) + "_" +
                        std::string(protocols::method_name(job.method)) + ".txt"),
                   output.manifest);
        writer.append(output.result);
        {
          std::lock_guard lock(progress_mutex);
          fresh.push_back(output.result);
        }
        const std::size_t c = ++completed;
        std::ostringstream line;
        line << "[" << c + failed.load() << "/" << jobs.size() << "] " << tag << " accuracy="
             << std::fixed << std::setprecision(4) << output.result.accuracy << " ("
             << std::setprecision(1) << output.result.wall_seconds << " s)";
        report(line.str());
      } catch (const std::exception& e) {
        ++failed;
        log << "error: " << e.what() << '\n';
        report("FAILED " + tag + ": " + e.what());
      }
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, jobs.size()));
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
  }

  std::vector<eval::RunResult> all = existing;
  all.insert(all.end(), fresh.begin(), fresh.end());
  std::ranges::sort(all, [](const auto& a, const auto& b) { return canonical_key(a) < canonical_key(b); });
  eval::write_results_csv(csv, all);
  write_reports(csv, out_dir / "summary.json", out_dir / "error_reduction.csv");

  outcome.completed = completed;
  outcome.failed = failed;
  return outcome;
}

void write_reports(const fs::path& results_csv, const fs::path& summary_json, const fs::path& reduction_csv) {
  const auto results = eval::read_results_csv(results_csv);
  const auto summaries = eval::summarize(results);
  eval::write_summary_json(summary_json, summaries);
  eval::write_reduction_csv(reduction_csv, eval::error_reduction_report(summaries));
}

}  // namespace kitl::cli
