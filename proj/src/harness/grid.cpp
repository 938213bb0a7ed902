#include <algorithm>
#include <fstream>
#include <numeric>

#include "histocl/error.hpp"
#include "histocl/harness.hpp"

namespace histocl::harness {

using nlohmann::json;

std::vector<json> enumerate_grid(const nlohmann::ordered_json& grid) {
  if (!grid.is_object() || grid.empty()) throw ConfigError("grid must be a non-empty object");
  std::vector<std::string> keys;
  std::vector<std::vector<json>> values;
  for (const auto& [key, list] : grid.items()) {
    if (!list.is_array() || list.empty()) throw ConfigError("grid entry '" + key + "' must be a non-empty list");
    keys.push_back(key);
    std::vector<json> vs;
    for (const auto& v : list) vs.push_back(json::parse(v.dump()));
    values.push_back(std::move(vs));
  }
  std::vector<json> out;
  std::vector<std::size_t> at(keys.size(), 0);
  for (;;) {
    json point = json::object();
    for (std::size_t k = 0; k < keys.size(); ++k) point[keys[k]] = values[k][at[k]];
    out.push_back(std::move(point));
    std::size_t k = keys.size();
    while (k > 0) {
      --k;
      if (++at[k] < values[k].size()) break;
      at[k] = 0;
      if (k == 0) return out;
    }
  }
}

void apply_override(json& cfg, const std::string& path, const json& value) {
  json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed grid key '" + path + "'");
    if (!node->is_object()) throw ConfigError("grid key '" + path + "' does not name a config section");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

namespace {

std::string overrides_text(const json& overrides) {
  std::string out;
  for (const auto& [k, v] : overrides.items()) {
    if (!out.empty()) out += ";";
    out += k + "=" + v.dump();
  }
  return out;
}

}  // namespace

GridResult grid_search(const RunConfig& cfg, const nlohmann::ordered_json& grid, int threads) {
  if (!(cfg.data.split.val > 0.0)) throw ConfigError("grid search needs a validation split (data.split.val > 0)");
  const json base = cfg.to_json();
  const auto points = enumerate_grid(grid);

  GridResult out;
  out.points.resize(points.size());
  parallel_for(points.size(), threads > 0 ? threads : worker_threads(), [&](std::size_t i) {
    json c = base;
    for (const auto& [k, v] : points[i].items()) apply_override(c, k, v);
    c["train"]["seeds"] = json::array({cfg.train.seeds.front()});
    const RunConfig rc = RunConfig::from_json(c);
    const RunResult rr = run_experiment(rc, {}, 1);
    if (!rr.seeds.front().val_acc) throw ConfigError("grid point " + std::to_string(i) + " has no validation set");
    out.points[i] = {i, points[i], round5(*rr.seeds.front().val_acc), round5(rr.seeds.front().metrics.acc)};
  });

  out.ranking.resize(points.size());
  std::iota(out.ranking.begin(), out.ranking.end(), std::size_t{0});
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [&](std::size_t a, std::size_t b) { return out.points[a].val_acc > out.points[b].val_acc; });
  json best = base;
  for (const auto& [k, v] : out.points[out.ranking.front()].overrides.items()) apply_override(best, k, v);
  out.best = RunConfig::from_json(best);
  return out;
}

json grid_json(const GridResult& g) {
  json points = json::array();
  for (const auto& p : g.points) {
    points.push_back({{"index", p.index}, {"overrides", p.overrides}, {"val_acc", p.val_acc}, {"acc", p.acc}});
  }
  json ranked = json::array();
  for (std::size_t r = 0; r < g.ranking.size(); ++r) {
    const auto& p = g.points[g.ranking[r]];
    ranked.push_back({{"rank", r + 1}, {"index", p.index}, {"overrides", p.overrides}, {"val_acc", p.val_acc}});
  }
  return {{"schema_version", kSchemaVersion},
          {"points", points},
          {"ranking", ranked},
          {"best", {{"index", g.ranking.front()}, {"config", g.best.to_json()}}}};
}

void write_grid(const GridResult& g, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  auto write = [](const std::filesystem::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write " + file.string());
    out << text;
    if (!out) throw IoError("write failed for " + file.string());
  };
  write(dir / "grid.json", grid_json(g).dump(2) + "\n");
  std::string csv = "rank,index,val_acc,acc,overrides\n";
  char buf[96];
  for (std::size_t r = 0; r < g.ranking.size(); ++r) {
    const auto& p = g.points[g.ranking[r]];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.5f,%.5f,", r + 1, p.index, p.val_acc, p.acc);
    std::string text = overrides_text(p.overrides);
    std::string quoted = "\"";
    for (char ch : text) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    csv += buf + quoted + "\"\n";
  }
  write(dir / "grid.csv", csv);
  write(dir / "best_config.json", g.best.to_json().dump(2) + "\n");
}

}  // namespace histocl::harness
