#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "histocl/patch.hpp"

namespace histocl::scenario {

enum class ScenarioKind { data_il, domain_il, class_il, task_il };

std::string_view to_string(ScenarioKind kind);
/// Throws ConfigError.
ScenarioKind parse_scenario_kind(std::string_view name);

struct Experience {
  int index = 0;
  Dataset train;
  Dataset test;
  std::set<int> classes_present;
  std::optional<int> task_id;
};

/// Where a class lands in the model: head id and output index inside it.
struct LabelTarget {
  int head = 0;
  int output = 0;
  bool operator==(const LabelTarget&) const = default;
};

struct ExperienceStream {
  ScenarioKind kind = ScenarioKind::domain_il;
  std::vector<Experience> experiences;
  bool task_id_at_test = false;
  std::vector<std::string> class_names;
  /// Output count per head; head ids are 0..size-1.
  std::vector<int> head_sizes;
  /// Per class id, its head/output routing.
  std::vector<LabelTarget> routing;

  std::size_t size() const { return experiences.size(); }
  LabelTarget target(const Patch& p) const;
  /// Class ids routed through a head, in output order.
  std::vector<int> classes_of_head(int head) const;
  /// Stream summary emitted before training.
  nlohmann::json manifest() const;
};

/// Class order plus group sizes, e.g. order 1,8,2,7,... with grouping 2,2,2,3.
struct ClassPlan {
  std::vector<int> order;
  std::vector<int> grouping;

  /// Identity order with the given grouping.
  static ClassPlan identity(int n_classes, std::vector<int> grouping);
  /// Parses 1-based digit strings ("182736945", "2223"); comma-separated
  /// lists are accepted for more than nine classes. Throws PlanMismatch.
  static ClassPlan parse(std::string_view order, std::string_view grouping);

  /// Throws PlanMismatch unless order is a permutation of 0..n_classes-1 and
  /// grouping sums to its length.
  void validate(int n_classes) const;
  std::vector<std::vector<int>> groups() const;
};

Dataset strip_task_ids(Dataset ds);

/// Seeded partition of train and test, stratified by (class, domain), into
/// n near-equal experiences. Throws InsufficientData / MissingDomain.
ExperienceStream build_data_il(const Dataset& train, const Dataset& test, int n_experiences, std::uint64_t seed);

/// Experience k holds domain order[k]. Throws MissingDomain.
ExperienceStream build_domain_il(const Dataset& train, const Dataset& test,
                                 const std::array<int, 5>& order = {1, 2, 3, 4, 5});

/// Experience k holds every example of the k-th class group; one shared head.
ExperienceStream build_class_il(const Dataset& train, const Dataset& test, const ClassPlan& plan);

/// Same grouping as class_il, one head per experience, task ids on patches.
ExperienceStream build_task_il(const Dataset& train, const Dataset& test, const ClassPlan& plan);

enum class TumorOrder { a_first, b_first };

struct TwoTumorOptions {
  TumorOrder order = TumorOrder::a_first;
  /// |train of b| / |train of a| after subsampling.
  double volume_ratio = 1.0;
  std::uint64_t seed = 0;
  /// Class names (case-insensitive) mapped to "tumor"; everything else is "normal".
  std::vector<std::string> tumor_classes{"tumor", "tum"};
};

/// Maps a dataset onto the shared {normal, tumor} label space. Throws
/// LabelSpaceMismatch when no tumor class exists.
Dataset harmonize_tumor_labels(const Dataset& ds, const std::vector<std::string>& tumor_classes);

/// Two single-domain experiences (dataset a = domain 1, b = domain 2).
/// Throws LabelSpaceMismatch.
ExperienceStream build_two_tumor_domain_il(const Dataset& a_train, const Dataset& a_test, const Dataset& b_train,
                                           const Dataset& b_test, const TwoTumorOptions& options);

/// Seeded class-proportional subsample of exactly `count` patches.
Dataset subsample(const Dataset& ds, std::size_t count, std::uint64_t seed);

}  // namespace histocl::scenario
