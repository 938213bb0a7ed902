#include <fstream>
#include <set>

#include "histocl/error.hpp"
#include "histocl/harness.hpp"

namespace histocl::harness {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError("'" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + section + "." + key + "'");
  }
}

template <typename T>
T get(const json& j, const char* key, T fallback, const std::string& section) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("'" + section + "." + key + "' has the wrong type: " + e.what());
  }
}

DataConfig parse_data(const json& j, const std::string& section) {
  check_keys(j, {"source", "root", "classes", "synth", "augment", "side", "split"}, section);
  DataConfig d;
  d.source = get(j, "source", d.source, section);
  d.root = get(j, "root", std::string(), section);
  d.classes = get(j, "classes", d.classes, section);
  d.side = get(j, "side", d.side, section);
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    const std::string sec = section + ".synth";
    check_keys(s, {"classes", "per_class", "side", "seed"}, sec);
    d.synth.classes = get(s, "classes", d.synth.classes, sec);
    d.synth.per_class = get(s, "per_class", d.synth.per_class, sec);
    d.synth.side = get(s, "side", d.synth.side, sec);
    d.synth.seed = get(s, "seed", d.synth.seed, sec);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    const std::string sec = section + ".augment";
    check_keys(a, {"enabled", "seed"}, sec);
    d.augment = get(a, "enabled", d.augment, sec);
    d.augment_seed = get(a, "seed", d.augment_seed, sec);
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    const std::string sec = section + ".split";
    check_keys(s, {"train", "val", "test", "seed", "stratified"}, sec);
    d.split.train = get(s, "train", d.split.train, sec);
    d.split.val = get(s, "val", d.split.val, sec);
    d.split.test = get(s, "test", d.split.test, sec);
    d.split.seed = get(s, "seed", d.split.seed, sec);
    d.split.stratified = get(s, "stratified", d.split.stratified, sec);
  }
  return d;
}

json data_json(const DataConfig& d) {
  return {{"source", d.source},
          {"root", d.root.string()},
          {"classes", d.classes},
          {"side", d.side},
          {"synth", {{"classes", d.synth.classes}, {"per_class", d.synth.per_class}, {"side", d.synth.side},
                     {"seed", d.synth.seed}}},
          {"augment", {{"enabled", d.augment}, {"seed", d.augment_seed}}},
          {"split", {{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test}, {"seed", d.split.seed},
                     {"stratified", d.split.stratified}}}};
}

void validate_data(const DataConfig& d, const std::string& section) {
  if (d.source != "synth" && d.source != "folder" && d.source != "augmented_folder") {
    throw ConfigError(section + ".source must be synth, folder or augmented_folder");
  }
  if (d.source != "synth" && d.root.empty()) throw ConfigError(section + ".root is required for " + d.source);
  if (d.source == "synth") {
    if (d.synth.classes < 2 || d.synth.classes > 16) throw ConfigError(section + ".synth.classes must lie in [2,16]");
    if (d.synth.per_class < 10) throw ConfigError(section + ".synth.per_class must be >= 10");
    if (d.synth.side < 8) throw ConfigError(section + ".synth.side must be >= 8");
  }
  if (d.side != 0 && d.side < 8) throw ConfigError(section + ".side must be 0 or >= 8");
  d.split.validate();
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j, {"data", "scenario", "model", "strategy", "train", "output"}, "config");
  RunConfig c;
  if (j.contains("data")) c.data = parse_data(j.at("data"), "data");

  if (j.contains("scenario")) {
    const auto& s = j.at("scenario");
    check_keys(s, {"kind", "n_experiences", "domain_order", "class_order", "grouping", "two_tumor"}, "scenario");
    c.scenario.kind = scenario::parse_scenario_kind(get(s, "kind", std::string("class_il"), "scenario"));
    c.scenario.n_experiences = get(s, "n_experiences", c.scenario.n_experiences, "scenario");
    c.scenario.domain_order = get(s, "domain_order", c.scenario.domain_order, "scenario");
    c.scenario.class_order = get(s, "class_order", c.scenario.class_order, "scenario");
    c.scenario.grouping = get(s, "grouping", c.scenario.grouping, "scenario");
    if (s.contains("two_tumor") && !s.at("two_tumor").is_null()) {
      const auto& t = s.at("two_tumor");
      check_keys(t, {"data", "order", "volume_ratio", "tumor_classes"}, "scenario.two_tumor");
      TwoTumorConfig tt;
      if (!t.contains("data")) throw ConfigError("scenario.two_tumor.data is required");
      tt.second = parse_data(t.at("data"), "scenario.two_tumor.data");
      const auto order = get(t, "order", std::string("a_first"), "scenario.two_tumor");
      if (order == "a_first") {
        tt.order = scenario::TumorOrder::a_first;
      } else if (order == "b_first") {
        tt.order = scenario::TumorOrder::b_first;
      } else {
        throw ConfigError("scenario.two_tumor.order must be a_first or b_first");
      }
      tt.volume_ratio = get(t, "volume_ratio", tt.volume_ratio, "scenario.two_tumor");
      tt.tumor_classes = get(t, "tumor_classes", tt.tumor_classes, "scenario.two_tumor");
      c.scenario.two_tumor = std::move(tt);
    }
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"blocks"}, "model");
    if (m.contains("blocks")) {
      c.model.blocks.clear();
      if (!m.at("blocks").is_array()) throw ConfigError("model.blocks must be an array");
      for (const auto& b : m.at("blocks")) {
        check_keys(b, {"channels", "pool"}, "model.blocks[]");
        nn::ConvBlockSpec spec;
        spec.out_channels = get(b, "channels", 16, "model.blocks[]");
        spec.pool = get(b, "pool", false, "model.blocks[]");
        c.model.blocks.push_back(spec);
      }
    }
  }

  if (j.contains("strategy")) c.strategy = strategy::StrategyParams::from_json(j.at("strategy"));

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, {"epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_schedule", "regime", "seeds",
                   "eval_batch"},
               "train");
    c.train.epochs = get(t, "epochs", c.train.epochs, "train");
    c.train.batch_size = get(t, "batch_size", c.train.batch_size, "train");
    c.train.lr = get(t, "lr", c.train.lr, "train");
    c.train.momentum = get(t, "momentum", c.train.momentum, "train");
    c.train.weight_decay = get(t, "weight_decay", c.train.weight_decay, "train");
    c.train.eval_batch = get(t, "eval_batch", c.train.eval_batch, "train");
    c.train.seeds = get(t, "seeds", c.train.seeds, "train");
    c.train.regime = strategy::parse_regime(get(t, "regime", std::string("offline"), "train"));
    if (t.contains("lr_schedule")) {
      c.train.schedule.clear();
      for (const auto& s : t.at("lr_schedule")) {
        check_keys(s, {"epoch", "multiplier"}, "train.lr_schedule[]");
        c.train.schedule.push_back({get(s, "epoch", 0, "train.lr_schedule[]"),
                                    get(s, "multiplier", 1.0, "train.lr_schedule[]")});
      }
    }
  }

  if (j.contains("output")) {
    const auto& o = j.at("output");
    check_keys(o, {"dir", "checkpoint"}, "output");
    c.output.dir = get(o, "dir", c.output.dir.string(), "output");
    c.output.checkpoint = get(o, "checkpoint", c.output.checkpoint, "output");
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(file.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json blocks = json::array();
  for (const auto& b : model.blocks) blocks.push_back({{"channels", b.out_channels}, {"pool", b.pool}});
  json schedule = json::array();
  for (const auto& s : train.schedule) schedule.push_back({{"epoch", s.epoch}, {"multiplier", s.multiplier}});
  json scen = {{"kind", std::string(scenario::to_string(scenario.kind))},
               {"n_experiences", scenario.n_experiences},
               {"domain_order", scenario.domain_order},
               {"class_order", scenario.class_order},
               {"grouping", scenario.grouping}};
  if (scenario.two_tumor) {
    const auto& t = *scenario.two_tumor;
    scen["two_tumor"] = {{"data", data_json(t.second)},
                         {"order", t.order == scenario::TumorOrder::a_first ? "a_first" : "b_first"},
                         {"volume_ratio", t.volume_ratio},
                         {"tumor_classes", t.tumor_classes}};
  }
  return {{"data", data_json(data)},
          {"scenario", scen},
          {"model", {{"blocks", blocks}}},
          {"strategy", strategy.to_json()},
          {"train", {{"epochs", train.epochs},
                     {"batch_size", train.batch_size},
                     {"lr", train.lr},
                     {"momentum", train.momentum},
                     {"weight_decay", train.weight_decay},
                     {"lr_schedule", schedule},
                     {"regime", std::string(strategy::to_string(train.regime))},
                     {"seeds", train.seeds},
                     {"eval_batch", train.eval_batch}}},
          {"output", {{"dir", output.dir.string()}, {"checkpoint", output.checkpoint}}}};
}

void RunConfig::validate() const {
  validate_data(data, "data");
  if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.seeds.empty()) throw ConfigError("train.seeds needs at least one seed");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (train.momentum < 0.0 || train.momentum >= 1.0) throw ConfigError("train.momentum must lie in [0,1)");
  if (train.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (train.eval_batch < 1) throw ConfigError("train.eval_batch must be >= 1");
  if (scenario.n_experiences < 1) throw ConfigError("scenario.n_experiences must be >= 1");
  if (model.blocks.empty()) throw ConfigError("model.blocks needs at least one block");
  for (const auto& b : model.blocks) {
    if (b.out_channels < 1) throw ConfigError("model.blocks[].channels must be >= 1");
  }
  if (scenario.two_tumor) {
    if (scenario.kind != scenario::ScenarioKind::domain_il) throw ConfigError("two_tumor requires kind domain_il");
    validate_data(scenario.two_tumor->second, "scenario.two_tumor.data");
    if (!(scenario.two_tumor->volume_ratio > 0.0)) throw ConfigError("two_tumor.volume_ratio must be > 0");
  }
  strategy::make_strategy(strategy);
}

strategy::Regime RunConfig::effective_regime() const {
  const auto forced = strategy::make_strategy(strategy)->forced_regime();
  return forced ? *forced : train.regime;
}

int RunConfig::effective_epochs() const { return effective_regime() == strategy::Regime::offline ? train.epochs : 1; }

}  // namespace histocl::harness
