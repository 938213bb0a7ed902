// Command-line front end: synth, augment, run, grid, report.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "histocl/data.hpp"
#include "histocl/error.hpp"
#include "histocl/harness.hpp"
#include "histocl/stain.hpp"

namespace {

using namespace histocl;

void print_summary(const harness::RunResult& r, const std::filesystem::path& dir) {
  for (const auto& [name, s] : r.aggregate) {
    std::printf("%-8s %.5f +- %.5f\n", name.c_str(), harness::round5(s.mean), harness::round5(s.std));
  }
  std::printf("results written to %s\n", dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning benchmark for H&E histopathology patches"};
  app.require_subcommand(1);

  int classes = 6, per_class = 200, side = 32;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  auto* synth = app.add_subcommand("synth", "Write a synthetic H&E-like dataset folder");
  synth->add_option("--classes", classes, "Number of classes (2-16)")->check(CLI::Range(2, 16));
  synth->add_option("--per-class", per_class, "Patches per class")->check(CLI::PositiveNumber);
  synth->add_option("--side", side, "Patch side in pixels")->check(CLI::Range(8, 4096));
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", out_dir, "Output folder")->required();

  std::filesystem::path in_dir;
  std::uint64_t aug_seed = 0;
  auto* augment = app.add_subcommand("augment", "Apply the five-domain stain augmentation to a dataset folder");
  augment->add_option("--in", in_dir, "Input folder (<class>/<image>.png)")->required()->check(CLI::ExistingDirectory);
  augment->add_option("--out", out_dir, "Output folder (domain_<k>/<class>/...)")->required();
  augment->add_option("--seed", aug_seed, "Augmentation seed");

  std::filesystem::path config_file, output_override;
  int threads = 0;
  auto* run = app.add_subcommand("run", "Run an experiment from a config file");
  run->add_option("--config", config_file, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--output", output_override, "Override output.dir");
  run->add_option("--threads", threads, "Worker threads (default: HISTOCL_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);

  std::filesystem::path grid_file;
  auto* grid = app.add_subcommand("grid", "Grid-search hyperparameters by validation accuracy");
  grid->add_option("--config", config_file, "Base experiment config (JSON)")->required()->check(CLI::ExistingFile);
  grid->add_option("--grid", grid_file, "Grid: {\"strategy.lambda\": [0, 100], ...}")->required()->check(CLI::ExistingFile);
  grid->add_option("--output", output_override, "Override output.dir");
  grid->add_option("--threads", threads, "Worker threads")->check(CLI::NonNegativeNumber);

  std::filesystem::path result_file;
  auto* report = app.add_subcommand("report", "Regenerate CSV and SVG files from a stored result.json");
  report->add_option("--result", result_file, "Stored result.json")->required()->check(CLI::ExistingFile);
  report->add_option("--output", output_override, "Folder for the reports (default: next to result.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 1;
  }

  try {
    if (*synth) {
      const auto ds = data::synth_generate(classes, per_class, side, seed);
      const auto m = data::write_folder(ds, out_dir);
      std::printf("wrote %zu patches (%d classes) to %s, checksum %s\n", ds.size(), ds.num_classes(),
                  out_dir.string().c_str(), m.at("checksum").dump().c_str());
    } else if (*augment) {
      const auto ds = data::load_folder(in_dir);
      const auto aug = stain::build_augmented_dataset(ds, stain::default_domain_specs(), aug_seed);
      data::write_folder(aug, out_dir, true);
      std::printf("wrote %zu augmented patches to %s\n", aug.size(), out_dir.string().c_str());
    } else if (*run) {
      auto cfg = harness::RunConfig::load(config_file);
      if (!output_override.empty()) cfg.output.dir = output_override;
      const auto result = harness::run_experiment(cfg, {}, threads);
      harness::write_results(result, cfg.output.dir);
      print_summary(result, cfg.output.dir);
    } else if (*grid) {
      auto cfg = harness::RunConfig::load(config_file);
      if (!output_override.empty()) cfg.output.dir = output_override;
      std::ifstream in(grid_file);
      nlohmann::ordered_json g;
      try {
        g = nlohmann::ordered_json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(grid_file.string() + " is not valid JSON: " + e.what());
      }
      const auto result = harness::grid_search(cfg, g, threads);
      harness::write_grid(result, cfg.output.dir);
      const auto& best = result.points[result.ranking.front()];
      std::printf("best point %zu: %s (val acc %.5f)\n", best.index, best.overrides.dump().c_str(), best.val_acc);
      std::printf("grid written to %s\n", cfg.output.dir.string().c_str());
    } else if (*report) {
      const auto doc = harness::load_result(result_file);
      const auto dir = output_override.empty() ? result_file.parent_path() : output_override;
      harness::write_reports(doc, dir.empty() ? std::filesystem::path(".") : dir);
      std::printf("reports written to %s\n", (dir.empty() ? std::filesystem::path(".") : dir).string().c_str());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
