#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <regex>

#include "fixtures.hpp"
#include "histocl/error.hpp"
#include "histocl/harness.hpp"

using namespace histocl;
using namespace histocl::harness;
using nlohmann::json;

namespace {

struct Exec {
  int code = -1;
  std::string out;
};

Exec run_cli(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(HISTOCL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  Exec e;
  e.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  e.out = testing::read_file(log);
  return e;
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto at = text.find(needle); at != std::string::npos; at = text.find(needle, at + 1)) ++n;
  return n;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("config parsing covers every section and rejects unknown keys") {
    const json doc = {
        {"data",
         {{"source", "synth"},
          {"synth", {{"classes", 4}, {"per_class", 20}, {"side", 16}, {"seed", 9}}},
          {"augment", {{"enabled", true}, {"seed", 4}}},
          {"split", {{"train", 0.6}, {"val", 0.2}, {"test", 0.2}, {"seed", 3}, {"stratified", false}}}}},
        {"scenario", {{"kind", "task_il"}, {"grouping", "22"}, {"class_order", "2143"}}},
        {"model", {{"blocks", json::array({{{"channels", 8}, {"pool", true}}, {{"channels", 12}}})}}},
        {"strategy", {{"name", "lwf"}, {"lambda_o", 0.5}, {"temperature", 3.0}}},
        {"train",
         {{"epochs", 3},
          {"batch_size", 8},
          {"lr", 0.02},
          {"momentum", 0.5},
          {"weight_decay", 0.0},
          {"regime", "online"},
          {"seeds", {4, 7}},
          {"eval_batch", 32}}},
        {"output", {{"dir", "out/x"}, {"checkpoint", true}}}};
    const RunConfig c = RunConfig::from_json(doc);
    CHECK(c.data.synth.per_class == 20);
    CHECK(c.data.augment);
    CHECK(c.data.split.stratified == false);
    CHECK(c.scenario.kind == scenario::ScenarioKind::task_il);
    CHECK(c.model.blocks.size() == 2);
    CHECK(c.model.blocks[0].pool);
    CHECK(c.strategy.temperature == 3.0);
    CHECK(c.train.seeds == std::vector<std::uint64_t>{4, 7});
    CHECK(c.effective_epochs() == 1);
    CHECK(c.output.checkpoint);
    CHECK(RunConfig::from_json(c.to_json()).to_json() == c.to_json());

    for (const auto& path : {"/bogus", "/data/bogus", "/data/split/bogus", "/scenario/bogus", "/train/bogus",
                             "/output/bogus", "/strategy/bogus"}) {
      json bad = doc;
      bad[json::json_pointer(path)] = 1;
      CAPTURE(path);
      CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
    }
    json wrong = doc;
    wrong["train"]["epochs"] = "many";
    CHECK_THROWS_AS(RunConfig::from_json(wrong), ConfigError);
    wrong = doc;
    wrong["scenario"]["kind"] = "task_free";
    CHECK_THROWS_AS(RunConfig::from_json(wrong), ConfigError);

    const auto dir = testing::temp_dir("cfg");
    CHECK_THROWS_AS(RunConfig::load(dir / "absent.json"), IoError);
    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK_THROWS_AS(RunConfig::load(dir / "broken.json"), ConfigError);
  }

  TEST_CASE("metrics of the worked example") {
    const AccMatrix r{{0.9, 0.1}, {0.7, 0.8}};
    const std::vector<double> chance{0.5, 0.5};
    const Metrics m = compute_metrics(r, chance);
    CHECK(m.acc == 0.75);
    CHECK(m.bwt == -0.2);
    CHECK(m.fwt == -0.4);
    const std::vector<double> matched{0.5, 0.1};
    CHECK(compute_metrics(r, matched).fwt == 0.0);
    const AccMatrix flat{{0.6, 0.3, 0.2}, {0.6, 0.3, 0.2}, {0.6, 0.3, 0.2}};
    const std::vector<double> c3{0.5, 0.5, 0.5};
    CHECK(compute_metrics(flat, c3).bwt == 0.0);
    const AccMatrix single{{0.42}};
    const std::vector<double> c1{0.5};
    const Metrics one = compute_metrics(single, c1);
    CHECK(one.acc == 0.42);
    CHECK(one.bwt == 0.0);
    CHECK(one.fwt == 0.0);
    const AccMatrix ragged{{0.1, 0.2}, {0.3}};
    CHECK_THROWS_AS(compute_metrics(ragged, chance), ShapeMismatch);
    CHECK_THROWS_AS(compute_metrics(r, c1), ShapeMismatch);
  }

  TEST_CASE("seed aggregation") {
    const std::vector<double> two{0.7, 0.8};
    const Summary s = aggregate(two);
    CHECK(s.mean == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(s.std == doctest::Approx(0.07071067811865482).epsilon(1e-12));
    const std::vector<double> one{0.3};
    CHECK(aggregate(one) == Summary{0.3, 0.0});
    Rng rng(4);
    for (int n = 0; n < 50; ++n) {
      std::vector<double> v(2 + uniform_index(rng, 6));
      for (auto& x : v) x = uniform(rng, 0, 1);
      std::vector<double> w = v;
      shuffle(w.begin(), w.end(), rng);
      const Summary a = aggregate(v), b = aggregate(w);
      CHECK(std::abs(a.mean - b.mean) < 1e-12);
      CHECK(std::abs(a.std - b.std) < 1e-12);
    }
  }

  TEST_CASE("single-experience joint run: ACC equals R[0][0]") {
    RunConfig cfg = testing::small_config("joint");
    cfg.scenario.grouping = "4";
    const RunResult r = run_experiment(cfg, {}, 1);
    REQUIRE(r.seeds.size() == 1);
    const SeedResult& s = r.seeds.front();
    REQUIRE(s.acc_matrix.size() == 1);
    CHECK(s.metrics.acc == doctest::Approx(s.acc_matrix[0][0]).epsilon(1e-12));
    CHECK(s.metrics.bwt == 0.0);
    CHECK(s.acc_matrix[0][0] == double(s.correct[0][0]) / double(s.test_sizes[0]));
  }

  TEST_CASE("run outputs are deterministic and well formed") {
    const RunConfig cfg = testing::small_config("ewc");
    const RunResult a = run_experiment(cfg, {}, 1);
    const RunResult b = run_experiment(cfg, {}, 1);
    const auto da = testing::temp_dir("run_a"), db = testing::temp_dir("run_b");
    write_results(a, da);
    write_results(b, db);
    const std::string ja = testing::read_file(da / "result.json");
    CHECK(ja == testing::read_file(db / "result.json"));
    CHECK(std::filesystem::exists(da / "timing.json"));

    const SeedResult& s = a.seeds.front();
    const std::size_t T = s.acc_matrix.size();
    CHECK(T == 2);
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j) {
        CHECK(s.acc_matrix[i][j] == double(s.correct[i][j]) / double(s.test_sizes[j]));
        CHECK((s.acc_matrix[i][j] >= 0.0 && s.acc_matrix[i][j] <= 1.0));
      }
    }
    CHECK(s.val_acc.has_value());
    CHECK(a.aggregate.count("val_acc") == 1);

    const std::string csv = testing::read_file(da / ("acc_matrix_" + std::to_string(s.seed) + ".csv"));
    const std::regex row(R"(^\d+(,\d\.\d{5})+$)");
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "after_exp,test_0,test_1");
    int rows = 0;
    while (std::getline(lines, line)) {
      CHECK(std::regex_match(line, row));
      ++rows;
    }
    CHECK(rows == 2);

    const std::string svg = testing::read_file(da / "curves.svg");
    CHECK(count_of(svg, "<polyline class=\"curve\"") == T);

    const json doc = load_result(da / "result.json");
    CHECK(doc["schema_version"] == kSchemaVersion);
    const auto dr = testing::temp_dir("run_report");
    write_reports(doc, dr);
    CHECK(testing::read_file(dr / "curves.svg") == svg);
    CHECK(testing::read_file(dr / ("acc_matrix_" + std::to_string(s.seed) + ".csv")) == csv);
  }

  TEST_CASE("online regimes visit each example once") {
    RunConfig cfg = testing::small_config("agem");
    cfg.strategy.capacity = 20;
    cfg.strategy.ref_batch = 8;
    const RunResult r = run_experiment(cfg, {}, 1);
    CHECK(r.regime == "online");
    for (const auto& e : r.seeds.front().experiences) {
      CHECK(e.max_visits == 1);
      CHECK(e.examples_seen == e.train_set_size);
      CHECK(e.epochs == 1);
    }

    RunConfig cope = testing::small_config("cope");
    cope.data.synth.per_class = 120;
    cope.strategy.capacity = 20;
    const RunResult rc = run_experiment(cope, {}, 1);
    CHECK(rc.regime == "online_mini");
    for (const auto& e : rc.seeds.front().experiences) {
      CHECK(e.max_visits == 1);
      REQUIRE(!e.mini_experience_sizes.empty());
      for (std::size_t k = 0; k + 1 < e.mini_experience_sizes.size(); ++k) CHECK(e.mini_experience_sizes[k] == 128);
      CHECK(e.mini_experience_sizes.back() <= 128);
      int total = 0;
      for (int v : e.mini_experience_sizes) total += v;
      CHECK(static_cast<std::size_t>(total) == e.train_set_size);
    }
  }

  TEST_CASE("grid enumeration") {
    const nlohmann::ordered_json g = nlohmann::ordered_json::parse(R"({"strategy.lambda": [0, 100], "train.lr": [0.1, 0.01, 0.001]})");
    const auto pts = enumerate_grid(g);
    REQUIRE(pts.size() == 6);
    CHECK(pts[0] == json({{"strategy.lambda", 0}, {"train.lr", 0.1}}));
    CHECK(pts[1] == json({{"strategy.lambda", 0}, {"train.lr", 0.01}}));
    CHECK(pts[3] == json({{"strategy.lambda", 100}, {"train.lr", 0.1}}));
    CHECK(enumerate_grid(nlohmann::ordered_json::parse(R"({"train.lr": [0.5]})")).size() == 1);
    CHECK_THROWS_AS(enumerate_grid(nlohmann::ordered_json::parse(R"({"train.lr": []})")), ConfigError);
    json cfg = {{"train", {{"lr", 1}}}};
    apply_override(cfg, "strategy.lambda", 5);
    apply_override(cfg, "train.lr", 0.5);
    CHECK(cfg == json({{"train", {{"lr", 0.5}}}, {"strategy", {{"lambda", 5}}}}));
  }

  TEST_CASE("grid search ranks points by validation accuracy") {
    RunConfig cfg = testing::small_config("ewc");
    cfg.train.epochs = 1;
    const auto g = grid_search(cfg, nlohmann::ordered_json::parse(R"({"strategy.lambda": [0, 1000]})"), 1);
    REQUIRE(g.points.size() == 2);
    CHECK(g.points[0].overrides["strategy.lambda"] == 0);
    CHECK(g.points[g.ranking[0]].val_acc >= g.points[g.ranking[1]].val_acc);
    CHECK(g.best.strategy.lambda == g.points[g.ranking[0]].overrides["strategy.lambda"].get<double>());
    const auto single = grid_search(cfg, nlohmann::ordered_json::parse(R"({"strategy.lambda": [7]})"), 1);
    CHECK(single.ranking == std::vector<std::size_t>{0});
    CHECK(single.best.strategy.lambda == 7.0);
    RunConfig noval = cfg;
    noval.data.split = {0.8, 0.0, 0.2, 0, true};
    CHECK_THROWS_AS(grid_search(noval, nlohmann::ordered_json::parse(R"({"strategy.lambda": [7]})"), 1), ConfigError);
  }

  TEST_CASE("command-line exit codes and messages") {
    const auto dir = testing::temp_dir("cli");
    const auto missing = run_cli("run --config " + (dir / "c.json").string(), dir / "log1");
    CHECK(missing.code == 1);
    CHECK(missing.out.find("c.json") != std::string::npos);

    CHECK(run_cli("frobnicate", dir / "log2").code == 1);

    const auto s1 = run_cli("synth --classes 3 --per-class 10 --side 16 --seed 4 --out " + (dir / "d1").string(), dir / "log3");
    const auto s2 = run_cli("synth --classes 3 --per-class 10 --side 16 --seed 4 --out " + (dir / "d2").string(), dir / "log4");
    REQUIRE(s1.code == 0);
    REQUIRE(s2.code == 0);
    const auto checksum = [](const std::string& out) { return out.substr(out.find("checksum")); };
    CHECK(checksum(s1.out) == checksum(s2.out));

    // a valid config whose data folder does not exist fails at run time
    std::ofstream(dir / "bad.json") << R"({"data": {"source": "folder", "root": ")" << (dir / "nowhere").string()
                                    << R"("}, "train": {"seeds": [0]}})";
    const auto rt = run_cli("run --config " + (dir / "bad.json").string(), dir / "log5");
    CHECK(rt.code == 2);
    CHECK(rt.out.find("error:") != std::string::npos);

    std::ofstream(dir / "unknown.json") << R"({"train": {"epoch": 3}})";
    const auto uk = run_cli("run --config " + (dir / "unknown.json").string(), dir / "log6");
    CHECK(uk.code == 2);
    CHECK(uk.out.find("epoch") != std::string::npos);
  }
}
