#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "histocl/data.hpp"
#include "histocl/nn/checkpoint.hpp"
#include "histocl/nn/model.hpp"
#include "histocl/nn/optimizer.hpp"
#include "histocl/scenario.hpp"
#include "histocl/strategy.hpp"

namespace histocl::harness {

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// configuration

struct SynthParams {
  int classes = 6;
  int per_class = 200;
  int side = 32;
  std::uint64_t seed = 1;
};

struct DataConfig {
  /// synth | folder | augmented_folder
  std::string source = "synth";
  std::filesystem::path root;
  /// Expected class folders in id order; empty discovers them.
  std::vector<std::string> classes;
  SynthParams synth;
  /// Applies the five-domain stain augmentation after loading.
  bool augment = false;
  std::uint64_t augment_seed = 0;
  /// Resample to side x side when > 0.
  int side = 0;
  data::SplitSpec split{0.7, 0.1, 0.2, 0, true};
};

struct TwoTumorConfig {
  DataConfig second;
  scenario::TumorOrder order = scenario::TumorOrder::a_first;
  double volume_ratio = 1.0;
  std::vector<std::string> tumor_classes{"tumor", "tum"};
};

struct ScenarioConfig {
  scenario::ScenarioKind kind = scenario::ScenarioKind::class_il;
  int n_experiences = 5;
  std::array<int, 5> domain_order{1, 2, 3, 4, 5};
  /// 1-based class order ("182736945"); empty keeps id order.
  std::string class_order;
  /// Group sizes ("2223"); empty means pairs, with an odd class left alone.
  std::string grouping;
  std::optional<TwoTumorConfig> two_tumor;
};

struct ModelConfig {
  std::vector<nn::ConvBlockSpec> blocks{{16, 3, true}, {32, 3, true}, {64, 3, false}};
};

struct TrainConfig {
  int epochs = 15;
  int batch_size = 16;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::vector<nn::LrStep> schedule{{10, 0.1}, {13, 0.1}};
  strategy::Regime regime = strategy::Regime::offline;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int eval_batch = 64;
};

struct OutputConfig {
  std::filesystem::path dir = "results";
  /// Writes model_<seed>.cldp with parameters and strategy state.
  bool checkpoint = false;
};

struct RunConfig {
  DataConfig data;
  ScenarioConfig scenario;
  ModelConfig model;
  strategy::StrategyParams strategy;
  TrainConfig train;
  OutputConfig output;

  /// Throws ConfigError on unknown keys, wrong types or invalid values.
  static RunConfig from_json(const nlohmann::json& j);
  /// Throws IoError when unreadable, ConfigError when malformed.
  static RunConfig load(const std::filesystem::path& file);
  nlohmann::json to_json() const;
  void validate() const;

  /// Configured regime unless the strategy imposes its own.
  strategy::Regime effective_regime() const;
  /// Online regimes train a single pass.
  int effective_epochs() const;
};

// ---------------------------------------------------------------------------
// data and streams

struct PreparedData {
  data::Splits main;
  std::optional<data::Splits> second;
};

Dataset load_source(const DataConfig& cfg);
PreparedData prepare_data(const RunConfig& cfg);

/// The experience stream of a seed. With `validation` the held-out
/// validation split replaces the test split.
scenario::ExperienceStream build_stream(const RunConfig& cfg, const PreparedData& data, std::uint64_t seed,
                                        bool validation = false);

nn::ModelSpec model_spec_for(const RunConfig& cfg, const scenario::ExperienceStream& stream, int input_side,
                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// evaluation and metrics

struct EvalCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Head mode takes the argmax of the patch's head, over the outputs of
/// `seen_classes` when that list is non-empty. The nearest-mean modes compare
/// L2-normalized features against `means`, limited to the patch's task
/// classes when task ids are given at test time; without means the heads are
/// used.
EvalCount evaluate(const nn::ParamVector& params, const nn::ModelSpec& spec, const scenario::ExperienceStream& stream,
                   const Dataset& test, strategy::ClassifierMode mode, std::span<const nn::ClassMean> means,
                   int eval_batch = 64, std::span<const int> seen_classes = {});

using AccMatrix = std::vector<std::vector<double>>;

struct Metrics {
  double acc = 0.0;
  double bwt = 0.0;
  double fwt = 0.0;
};

/// ACC, BWT and FWT of a T x T matrix. Results are rounded to 12 decimals so
/// summation noise does not leak into exact comparisons. Throws ShapeMismatch.
Metrics compute_metrics(const AccMatrix& r, std::span<const double> chance);

/// 1 / (classes present in experience j), per experience.
std::vector<double> chance_levels(const scenario::ExperienceStream& stream);

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  bool operator==(const Summary&) const = default;
};

/// Arithmetic mean and sample standard deviation (n-1; 0 for one value).
Summary aggregate(std::span<const double> values);

// ---------------------------------------------------------------------------
// running

struct ExperienceLog {
  int index = 0;
  std::size_t train_set_size = 0;
  /// Training rows drawn from the experience's training set (replay rows excluded).
  std::size_t examples_seen = 0;
  /// Largest number of visits to a single training example.
  int max_visits = 0;
  int epochs = 0;
  int steps = 0;
  std::vector<int> mini_experience_sizes;
  double mean_loss = 0.0;
  nlohmann::json strategy = nlohmann::json::object();
  double seconds = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  AccMatrix acc_matrix;
  std::vector<std::vector<std::size_t>> correct;
  std::vector<std::size_t> test_sizes;
  std::vector<double> chance;
  Metrics metrics;
  std::optional<double> val_acc;
  std::vector<ExperienceLog> experiences;
  double seconds = 0.0;
  nn::ParamVector final_params;
  std::optional<nn::Checkpoint> checkpoint;
};

struct RunResult {
  RunConfig config;
  nlohmann::json stream_manifest;
  std::string classifier_mode;
  std::string regime;
  int epochs = 0;
  std::vector<SeedResult> seeds;
  std::map<std::string, Summary> aggregate;
};

/// Observers for tests and tools. Called on the worker thread of the seed.
struct RunHooks {
  std::function<void(std::uint64_t seed, int experience, int step, const nn::ParamVector& params)> after_step;
  std::function<void(std::uint64_t seed, int experience, const strategy::Strategy& s)> after_experience;
};

/// Trains and evaluates one seed.
SeedResult run_seed(const RunConfig& cfg, const PreparedData& data, std::uint64_t seed, const RunHooks& hooks = {});

/// All seeds of a configuration, in parallel up to `threads` (0 = worker_threads()).
RunResult run_experiment(const RunConfig& cfg, const RunHooks& hooks = {}, int threads = 0);

/// HISTOCL_THREADS when set to a positive integer, else the hardware concurrency.
int worker_threads();

/// Runs fn(0..n-1) on up to `threads` workers; rethrows the first failure.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// persistence

/// Canonical, deterministic result document (reals rounded to 5 decimals).
nlohmann::json result_json(const RunResult& r);

/// Writes result.json, acc_matrix_<seed>.csv, curves.svg and timing.json
/// (plus checkpoints when present). Throws IoError with the path.
void write_results(const RunResult& r, const std::filesystem::path& dir);

/// Rewrites the CSV files and curves.svg from a stored result document.
void write_reports(const nlohmann::json& result, const std::filesystem::path& dir);

std::string acc_matrix_csv(const AccMatrix& r);
/// One polyline per test stream, mean accuracy over seeds vs experience.
std::string curves_svg(const nlohmann::json& result);

/// Parses a stored result.json. Throws IoError / ConfigError.
nlohmann::json load_result(const std::filesystem::path& file);

double round5(double x);

// ---------------------------------------------------------------------------
// grid search

struct GridPoint {
  std::size_t index = 0;
  nlohmann::json overrides;
  double val_acc = 0.0;
  double acc = 0.0;
};

struct GridResult {
  std::vector<GridPoint> points;  // enumeration order
  std::vector<std::size_t> ranking;  // indices into points, best first
  RunConfig best;
};

/// Row-major Cartesian product of the grid (keys in document order, last
/// key fastest); keys are dotted config paths such as "strategy.lambda".
std::vector<nlohmann::json> enumerate_grid(const nlohmann::ordered_json& grid);

/// Sets a dotted path inside a config document.
void apply_override(nlohmann::json& cfg, const std::string& path, const nlohmann::json& value);

/// Scores every point by validation ACC on the first seed. Ties keep the
/// earliest point. Throws ConfigError when no validation split exists.
GridResult grid_search(const RunConfig& cfg, const nlohmann::ordered_json& grid, int threads = 0);

nlohmann::json grid_json(const GridResult& g);
void write_grid(const GridResult& g, const std::filesystem::path& dir);

}  // namespace histocl::harness
