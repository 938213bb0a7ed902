#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "histocl/error.hpp"
#include "histocl/scenario.hpp"

using namespace histocl;
using namespace histocl::scenario;

namespace {

// `per_cell` patches for every (class, domain); domain 0 leaves the id unset.
Dataset grid_dataset(int classes, const std::vector<int>& domains, int per_cell, const std::string& tag = "") {
  Dataset ds;
  for (int c = 0; c < classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  for (int c = 0; c < classes; ++c) {
    for (int d : domains) {
      for (int i = 0; i < per_cell; ++i) {
        Patch p(8, 8);
        p.class_id = c;
        if (d > 0) p.domain_id = d;
        p.source_key = tag + std::to_string(c) + "_" + std::to_string(d) + "_" + std::to_string(i);
        p.pixels[0] = static_cast<std::uint8_t>(i);
        ds.patches.push_back(std::move(p));
      }
    }
  }
  return ds;
}

std::set<std::string> keys(const Dataset& ds) {
  std::set<std::string> out;
  for (const auto& p : ds.patches) out.insert(p.source_key);
  return out;
}

void check_train_disjoint(const ExperienceStream& s) {
  std::set<std::string> seen;
  for (const auto& e : s.experiences) {
    for (const auto& p : e.train.patches) CHECK(seen.insert(p.source_key).second);
  }
}

Dataset named(const std::vector<std::string>& names, int per_class, const std::string& tag) {
  Dataset ds;
  ds.class_names = names;
  for (int c = 0; c < static_cast<int>(names.size()); ++c) {
    for (int i = 0; i < per_class; ++i) {
      Patch p(8, 8);
      p.class_id = c;
      p.source_key = tag + std::to_string(c) + "_" + std::to_string(i);
      ds.patches.push_back(std::move(p));
    }
  }
  return ds;
}

}  // namespace

TEST_SUITE("scenario") {
  TEST_CASE("class plan parsing") {
    const ClassPlan plan = ClassPlan::parse("182736945", "2223");
    CHECK_NOTHROW(plan.validate(9));
    const auto g = plan.groups();
    REQUIRE(g.size() == 4);
    CHECK(g[0] == std::vector<int>{0, 7});
    CHECK(g[1] == std::vector<int>{1, 6});
    CHECK(g[2] == std::vector<int>{2, 5});
    CHECK(g[3] == std::vector<int>{8, 3, 4});
    const ClassPlan commas = ClassPlan::parse("1,2,10,3,4,5,6,7,8,9", "5,5");
    CHECK(commas.order[2] == 9);
    CHECK_THROWS_AS(ClassPlan::parse("12a", "3"), PlanMismatch);
    CHECK_THROWS_AS(ClassPlan::parse("1123", "4").validate(4), PlanMismatch);
    CHECK_THROWS_AS(ClassPlan::parse("1234", "22").validate(5), PlanMismatch);
    CHECK_THROWS_AS(ClassPlan::parse("1234", "23").validate(4), PlanMismatch);
    CHECK_THROWS_AS(ClassPlan::parse("1234", "202").validate(4), PlanMismatch);
  }

  TEST_CASE("class_il grouping 2223 over nine classes") {
    const Dataset train = grid_dataset(9, {1, 2}, 3, "tr");
    const Dataset test = grid_dataset(9, {1, 2}, 1, "te");
    const auto s = build_class_il(train, test, ClassPlan::parse("182736945", "2223"));
    CHECK(s.kind == ScenarioKind::class_il);
    CHECK_FALSE(s.task_id_at_test);
    REQUIRE(s.size() == 4);
    CHECK(s.experiences[0].classes_present == std::set<int>{0, 7});
    CHECK(s.experiences[3].classes_present == std::set<int>{3, 4, 8});
    const std::size_t sizes[4] = {2, 2, 2, 3};
    std::set<int> all;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& e = s.experiences[k];
      CHECK(e.classes_present.size() == sizes[k]);
      CHECK(e.train.size() == sizes[k] * 6);
      CHECK(e.test.size() == sizes[k] * 2);
      for (int c : e.classes_present) CHECK(all.insert(c).second);
      for (const auto& p : e.test.patches) CHECK(e.classes_present.count(p.class_id) == 1);
    }
    CHECK(all.size() == 9);
    CHECK(s.head_sizes == std::vector<int>{9});
    for (int c = 0; c < 9; ++c) CHECK(s.routing[static_cast<std::size_t>(c)] == LabelTarget{0, c});
    check_train_disjoint(s);

    const auto one = build_class_il(train, test, ClassPlan::identity(9, {9}));
    CHECK(one.size() == 1);
    CHECK(one.experiences[0].train.size() == train.size());
    CHECK_THROWS_AS(build_class_il(train, test, ClassPlan::identity(8, {8})), PlanMismatch);
  }

  TEST_CASE("task_il heads, task ids and stripping") {
    const Dataset train = grid_dataset(9, {0}, 4, "tr");
    const Dataset test = grid_dataset(9, {0}, 2, "te");
    const auto plan = ClassPlan::parse("182736945", "2223");
    const auto t = build_task_il(train, test, plan);
    CHECK(t.task_id_at_test);
    CHECK(t.head_sizes == std::vector<int>{2, 2, 2, 3});
    for (std::size_t k = 0; k < t.size(); ++k) {
      const auto& e = t.experiences[k];
      REQUIRE(e.task_id.has_value());
      CHECK(*e.task_id == static_cast<int>(k));
      for (const auto* ds : {&e.train, &e.test}) {
        for (const auto& p : ds->patches) {
          REQUIRE(p.task_id.has_value());
          CHECK(*p.task_id == static_cast<int>(k));
          CHECK(t.target(p).head == static_cast<int>(k));
        }
      }
    }
    CHECK(t.classes_of_head(3) == std::vector<int>{8, 3, 4});
    CHECK(t.routing[4] == LabelTarget{3, 2});

    const auto c = build_class_il(train, test, plan);
    REQUIRE(c.size() == t.size());
    for (std::size_t k = 0; k < t.size(); ++k) {
      CHECK(strip_task_ids(t.experiences[k].train) == c.experiences[k].train);
      CHECK(strip_task_ids(t.experiences[k].test) == c.experiences[k].test);
      CHECK(t.experiences[k].classes_present == c.experiences[k].classes_present);
    }
  }

  TEST_CASE("domain_il order and missing domains") {
    const Dataset train = grid_dataset(3, {1, 2, 3, 4, 5}, 2, "tr");
    const Dataset test = grid_dataset(3, {1, 2, 3, 4, 5}, 1, "te");
    const auto s = build_domain_il(train, test);
    REQUIRE(s.size() == 5);
    for (int k = 0; k < 5; ++k) {
      const auto& e = s.experiences[static_cast<std::size_t>(k)];
      CHECK(e.classes_present == std::set<int>{0, 1, 2});
      for (const auto& p : e.train.patches) CHECK(*p.domain_id == k + 1);
      for (const auto& p : e.test.patches) CHECK(*p.domain_id == k + 1);
    }
    const auto r = build_domain_il(train, test, {5, 4, 3, 2, 1});
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(r.experiences[k].train == s.experiences[4 - k].train);
      CHECK(r.experiences[k].test == s.experiences[4 - k].test);
    }
    check_train_disjoint(s);
    CHECK_THROWS_AS(build_domain_il(grid_dataset(3, {1, 2, 3, 4}, 2), test), MissingDomain);
    CHECK_THROWS_AS(build_domain_il(train, test, {1, 1, 2, 3, 4}), MissingDomain);
    CHECK_THROWS_AS(build_domain_il(grid_dataset(3, {0}, 5), test), MissingDomain);
  }

  TEST_CASE("data_il stratification") {
    const Dataset train = grid_dataset(3, {1, 2, 3, 4, 5}, 17, "tr");
    const Dataset test = grid_dataset(3, {1, 2, 3, 4, 5}, 6, "te");
    const auto s = build_data_il(train, test, 5, 42);
    REQUIRE(s.size() == 5);
    std::set<std::string> train_union, test_union;
    for (const auto& e : s.experiences) {
      CHECK(e.classes_present == std::set<int>{0, 1, 2});
      std::map<std::pair<int, int>, int> cell;
      for (const auto& p : e.train.patches) ++cell[{p.class_id, *p.domain_id}];
      CHECK(cell.size() == 15);
      for (const auto& [k, n] : cell) CHECK(std::abs(n - 17.0 / 5) <= 1.0);
      std::map<int, int> dom;
      for (const auto& p : e.train.patches) ++dom[*p.domain_id];
      for (const auto& [d, n] : dom) CHECK(std::abs(n - 51.0 / 5) <= 1.0);
      for (const auto& k : keys(e.train)) CHECK(train_union.insert(k).second);
      for (const auto& k : keys(e.test)) CHECK(test_union.insert(k).second);
    }
    CHECK(train_union == keys(train));
    CHECK(test_union == keys(test));
    CHECK(build_data_il(train, test, 5, 42).experiences[2].train == s.experiences[2].train);
    CHECK(build_data_il(train, test, 5, 43).experiences[2].train != s.experiences[2].train);

    const auto one = build_data_il(train, test, 1, 1);
    CHECK(keys(one.experiences[0].train) == keys(train));
    CHECK_THROWS_AS(build_data_il(grid_dataset(3, {1, 2, 3, 4, 5}, 4), test, 5, 1), InsufficientData);
    CHECK_THROWS_AS(build_data_il(grid_dataset(3, {0}, 20), test, 5, 1), MissingDomain);
  }

  TEST_CASE("data_il sizes at full dataset scale") {
    // 1740 per class per domain over 5 experiences -> 348
    const Dataset train = grid_dataset(1, {1, 2, 3, 4, 5}, 1740, "tr");
    const Dataset test = grid_dataset(1, {1, 2, 3, 4, 5}, 5, "te");
    const auto s = build_data_il(train, test, 5, 7);
    for (const auto& e : s.experiences) {
      std::map<int, int> dom;
      for (const auto& p : e.train.patches) ++dom[*p.domain_id];
      for (const auto& [d, n] : dom) CHECK(n == 348);
    }
  }

  TEST_CASE("builders leave their inputs untouched and are deterministic") {
    const Dataset train = grid_dataset(4, {1, 2, 3, 4, 5}, 6, "tr");
    const Dataset test = grid_dataset(4, {1, 2, 3, 4, 5}, 2, "te");
    const Dataset train_copy = train, test_copy = test;
    const auto a = build_task_il(train, test, ClassPlan::identity(4, {2, 2}));
    const auto b = build_data_il(train, test, 3, 5);
    CHECK(train == train_copy);
    CHECK(test == test_copy);
    CHECK(build_task_il(train, test, ClassPlan::identity(4, {2, 2})).manifest() == a.manifest());
    CHECK(build_data_il(train, test, 3, 5).manifest() == b.manifest());
  }

  TEST_CASE("manifest lists sizes, classes and domains") {
    const Dataset train = grid_dataset(4, {1, 2, 3, 4, 5}, 2, "tr");
    const Dataset test = grid_dataset(4, {1, 2, 3, 4, 5}, 1, "te");
    const auto m = build_class_il(train, test, ClassPlan::identity(4, {2, 2})).manifest();
    CHECK(m["kind"] == "class_il");
    CHECK(m["task_id_at_test"] == false);
    REQUIRE(m["experiences"].size() == 2);
    CHECK(m["experiences"][0]["train_size"] == 20);
    CHECK(m["experiences"][0]["test_size"] == 10);
    CHECK(m["experiences"][1]["classes"] == nlohmann::json::array({2, 3}));
    CHECK(m["experiences"][0]["domains"].size() == 5);
  }

  TEST_CASE("scenario kind names") {
    for (auto k : {ScenarioKind::data_il, ScenarioKind::domain_il, ScenarioKind::class_il, ScenarioKind::task_il}) {
      CHECK(parse_scenario_kind(to_string(k)) == k);
    }
    CHECK_THROWS_AS(parse_scenario_kind("task"), ConfigError);
  }

  TEST_CASE("tumor harmonization") {
    const Dataset crc = named({"ADI", "NORM", "TUM", "STR"}, 3, "a");
    const Dataset h = harmonize_tumor_labels(crc, {"tumor", "tum"});
    CHECK(h.class_names == std::vector<std::string>{"normal", "tumor"});
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(h.patches[i].class_id == (crc.patches[i].class_id == 2 ? 1 : 0));
    CHECK_THROWS_AS(harmonize_tumor_labels(named({"ADI", "NORM"}, 2, "x"), {"tumor"}), LabelSpaceMismatch);
    CHECK_THROWS_AS(harmonize_tumor_labels(named({"Tumor"}, 2, "x"), {"tumor"}), LabelSpaceMismatch);
  }

  TEST_CASE("two-tumor stream ratios and order") {
    const Dataset a_train = named({"normal", "tumor"}, 50, "a"), a_test = named({"normal", "tumor"}, 5, "at");
    const Dataset b_train = named({"Normal", "Tumor"}, 200, "b"), b_test = named({"Normal", "Tumor"}, 5, "bt");
    TwoTumorOptions opt;
    opt.seed = 3;
    const auto eq = build_two_tumor_domain_il(a_train, a_test, b_train, b_test, opt);
    REQUIRE(eq.size() == 2);
    CHECK(eq.kind == ScenarioKind::domain_il);
    CHECK(eq.experiences[0].train.size() == eq.experiences[1].train.size());
    CHECK(eq.experiences[0].train.size() == 100);
    for (const auto& p : eq.experiences[0].train.patches) CHECK(*p.domain_id == 1);
    for (const auto& p : eq.experiences[1].train.patches) CHECK(*p.domain_id == 2);
    check_train_disjoint(eq);

    opt.volume_ratio = 3.0;
    const auto three = build_two_tumor_domain_il(a_train, a_test, b_train, b_test, opt);
    CHECK(three.experiences[1].train.size() == 3 * three.experiences[0].train.size());
    CHECK(three.experiences[0].train.size() == 100);

    opt.order = TumorOrder::b_first;
    const auto swapped = build_two_tumor_domain_il(a_train, a_test, b_train, b_test, opt);
    CHECK(swapped.experiences[0].train == three.experiences[1].train);
    CHECK(swapped.experiences[1].train == three.experiences[0].train);
    CHECK(swapped.experiences[0].test == three.experiences[1].test);

    CHECK_THROWS_AS(build_two_tumor_domain_il(named({"a", "b"}, 5, "q"), a_test, b_train, b_test, {}), LabelSpaceMismatch);
  }

  TEST_CASE("subsample keeps class proportions") {
    const Dataset ds = named({"x", "y", "z"}, 0, "");
    Dataset d = ds;
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < (c + 1) * 20; ++i) {
        Patch p(8, 8);
        p.class_id = c;
        p.source_key = std::to_string(c) + "_" + std::to_string(i);
        d.patches.push_back(p);
      }
    }
    const Dataset s = subsample(d, 60, 9);
    CHECK(s.size() == 60);
    std::vector<int> n(3, 0);
    for (const auto& p : s.patches) ++n[static_cast<std::size_t>(p.class_id)];
    CHECK(n == std::vector<int>{10, 20, 30});
    CHECK(subsample(d, 60, 9) == s);
    CHECK(keys(s).size() == 60);
  }
}
