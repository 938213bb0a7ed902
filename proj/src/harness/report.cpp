#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "histocl/error.hpp"
#include "histocl/harness.hpp"

namespace histocl::harness {

using nlohmann::json;

double round5(double x) {
  const double r = std::round(x * 1e5) / 1e5;
  return r == 0.0 ? 0.0 : r;  // drop negative zero
}

namespace {

void round_reals(json& j) {
  if (j.is_number_float()) {
    j = round5(j.get<double>());
  } else if (j.is_structured()) {
    for (auto& v : j) round_reals(v);
  }
}

std::string fmt5(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.5f", round5(x));
  return buf;
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
  if (!out) throw IoError("write failed for " + file.string());
}

AccMatrix matrix_of(const json& seed) {
  return seed.at("acc_matrix").get<AccMatrix>();
}

std::string seed_label(const json& seed) { return std::to_string(seed.at("seed").get<std::uint64_t>()); }

}  // namespace

json result_json(const RunResult& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json exps = json::array();
    for (const auto& e : s.experiences) {
      exps.push_back({{"index", e.index},
                      {"train_set_size", e.train_set_size},
                      {"examples_seen", e.examples_seen},
                      {"max_visits", e.max_visits},
                      {"epochs", e.epochs},
                      {"steps", e.steps},
                      {"mini_experience_sizes", e.mini_experience_sizes},
                      {"mean_loss", e.mean_loss},
                      {"strategy", e.strategy}});
    }
    json js = {{"seed", s.seed},
               {"acc_matrix", s.acc_matrix},
               {"correct", s.correct},
               {"test_sizes", s.test_sizes},
               {"chance", s.chance},
               {"acc", s.metrics.acc},
               {"bwt", s.metrics.bwt},
               {"fwt", s.metrics.fwt},
               {"experiences", exps}};
    js["val_acc"] = s.val_acc ? json(*s.val_acc) : json(nullptr);
    seeds.push_back(std::move(js));
  }
  json agg = json::object();
  for (const auto& [name, summary] : r.aggregate) agg[name] = {{"mean", summary.mean}, {"std", summary.std}};
  round_reals(seeds);
  round_reals(agg);
  return {{"schema_version", kSchemaVersion},
          {"config", r.config.to_json()},
          {"stream", r.stream_manifest},
          {"classifier_mode", r.classifier_mode},
          {"regime", r.regime},
          {"epochs", r.epochs},
          {"seeds", seeds},
          {"aggregate", agg}};
}

std::string acc_matrix_csv(const AccMatrix& r) {
  std::string out = "after_exp";
  const std::size_t T = r.empty() ? 0 : r.front().size();
  for (std::size_t j = 0; j < T; ++j) out += ",test_" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < r.size(); ++i) {
    out += std::to_string(i);
    for (double v : r[i]) out += "," + fmt5(v);
    out += "\n";
  }
  return out;
}

std::string curves_svg(const json& result) {
  const auto& seeds = result.at("seeds");
  if (seeds.empty()) throw ConfigError("result holds no seeds");
  const AccMatrix first = matrix_of(seeds.front());
  const std::size_t T = first.size();
  AccMatrix mean(T, std::vector<double>(T, 0.0));
  for (const auto& s : seeds) {
    const AccMatrix m = matrix_of(s);
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j) mean[i][j] += m.at(i).at(j) / static_cast<double>(seeds.size());
    }
  }

  constexpr double W = 640, H = 400, L = 60, R = 140, Tm = 40, Bm = 50;
  const double pw = W - L - R, ph = H - Tm - Bm;
  auto x_of = [&](std::size_t i) { return L + (T > 1 ? pw * static_cast<double>(i) / static_cast<double>(T - 1) : pw / 2); };
  auto y_of = [&](double acc) { return Tm + ph * (1.0 - acc); };
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  char buf[256];
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
  svg << "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  const auto& cfg = result.at("config");
  svg << "<text x=\"" << L << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">"
      << cfg.at("strategy").at("name").get<std::string>() << " / " << cfg.at("scenario").at("kind").get<std::string>()
      << " (mean of " << seeds.size() << " seeds)</text>\n";
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n"
                "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n",
                L, Tm, L, Tm + ph, L, Tm + ph, L + pw, Tm + ph);
  svg << buf;
  for (int t = 0; t <= 4; ++t) {
    const double acc = t / 4.0;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">%.2f</text>\n",
                  L - 6, y_of(acc) + 4, acc);
    svg << buf;
  }
  for (std::size_t i = 0; i < T; ++i) {
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">%zu</text>\n",
                  x_of(i), Tm + ph + 16, i);
    svg << buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">"
                "after experience</text>\n",
                L + pw / 2, H - 12);
  svg << buf;
  for (std::size_t j = 0; j < T; ++j) {
    const char* colour = palette[j % 10];
    svg << "<polyline class=\"curve\" data-test=\"" << j << "\" fill=\"none\" stroke=\"" << colour
        << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < T; ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", x_of(i), y_of(round5(mean[i][j])));
      svg << buf;
    }
    svg << "\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" font-family=\"sans-serif\" font-size=\"12\" fill=\"%s\">test_%zu</text>\n",
                  L + pw + 12, Tm + 16.0 * static_cast<double>(j + 1), colour, j);
    svg << buf;
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_reports(const json& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& s : result.at("seeds")) {
    write_text(dir / ("acc_matrix_" + seed_label(s) + ".csv"), acc_matrix_csv(matrix_of(s)));
  }
  write_text(dir / "curves.svg", curves_svg(result));
}

void write_results(const RunResult& r, const std::filesystem::path& dir) {
  const json doc = result_json(r);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "result.json", doc.dump(2) + "\n");
  write_reports(doc, dir);

  json timing = {{"seeds", json::array()}};
  for (const auto& s : r.seeds) {
    json exps = json::array();
    for (const auto& e : s.experiences) exps.push_back(e.seconds);
    timing["seeds"].push_back({{"seed", s.seed}, {"seconds", s.seconds}, {"experience_seconds", exps}});
  }
  write_text(dir / "timing.json", timing.dump(2) + "\n");
  for (const auto& s : r.seeds) {
    if (s.checkpoint) nn::save_checkpoint(*s.checkpoint, dir / ("model_" + std::to_string(s.seed) + ".cldp"));
  }
}

json load_result(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(file.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object() || !j.contains("schema_version") || !j.contains("seeds")) {
    throw ConfigError(file.string() + " is not a result document");
  }
  if (j.at("schema_version").get<int>() != kSchemaVersion) {
    throw ConfigError(file.string() + " has unsupported schema_version");
  }
  return j;
}

}  // namespace histocl::harness
