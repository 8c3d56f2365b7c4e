#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "kitl/cli/cli.hpp"
#include "kitl/datapipe/datapipe.hpp"
#include "kitl/eval/eval.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"Few-shot transfer experiments"};
  app.require_subcommand(1);

  auto* ingest = app.add_subcommand("ingest", "Convert a raw dataset to the canonical tensor file");
  std::string format;
  fs::path in_path, out_path;
  ingest->add_option("--format", format, "idx, csv or kitl")->required()->check(CLI::IsMember({"idx", "csv", "kitl"}));
  ingest->add_option("--in", in_path, "Input file or directory")->required();
  ingest->add_option("--out", out_path, "Output .kitl file")->required();

  auto* run = app.add_subcommand("run", "Run an experiment grid");
  fs::path config_path;
  kitl::cli::GridOptions grid_options;
  run->add_option("--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
  run->add_option("--workers", grid_options.workers, "Concurrent replications")
      ->check(CLI::Range(std::size_t{1}, std::size_t{4096}));
  run->add_flag("--resume", grid_options.resume, "Skip conditions already in results.csv");

  auto* summarize = app.add_subcommand("summarize", "Write summary.json and error_reduction.csv");
  fs::path results_csv, summary_dir;
  summarize->add_option("--results", results_csv, "results.csv of a grid")->required()->check(CLI::ExistingFile);
  summarize->add_option("--out", summary_dir, "Output directory (defaults to the results directory)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss and architecture");
  std::uint64_t seed = 0;
  std::size_t seeds = 5;
  gradcheck->add_option("--seed", seed, "First seed");
  gradcheck->add_option("--seeds", seeds, "Number of seeds");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      const auto ds = kitl::data::ingest(in_path, kitl::data::parse_format(format));
      if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
      kitl::data::write_kitl(out_path, ds);
      std::cout << "wrote " << out_path.string() << ": " << ds.size() << " instances, " << ds.num_classes()
                << " classes\n";
      return 0;
    }
    if (*run) {
      const auto config = kitl::cli::parse_config(config_path);
      grid_options.progress = &std::cerr;
      const auto outcome = kitl::cli::run_grid(config, grid_options);
      std::cout << outcome.completed << " completed, " << outcome.skipped << " skipped, " << outcome.failed
                << " failed; results in " << kitl::cli::results_path(config).string() << '\n';
      return outcome.exit_status();
    }
    if (*summarize) {
      const fs::path dir = summary_dir.empty() ? results_csv.parent_path() : summary_dir;
      if (!dir.empty()) fs::create_directories(dir);
      kitl::cli::write_reports(results_csv, dir / "summary.json", dir / "error_reduction.csv");
      std::cout << "wrote " << (dir / "summary.json").string() << " and " << (dir / "error_reduction.csv").string()
                << '\n';
      return 0;
    }
    if (*gradcheck) {
      const auto report = kitl::cli::gradcheck_suite(seed, seeds);
      std::cout << report.text();
      return report.pass() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
