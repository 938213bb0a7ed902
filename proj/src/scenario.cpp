#include "histocl/scenario.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <string>

#include "histocl/error.hpp"
#include "histocl/rng.hpp"

namespace histocl::scenario {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::vector<int> parse_int_list(std::string_view text, bool one_based) {
  std::vector<int> out;
  const bool comma = text.find(',') != std::string_view::npos;
  if (comma) {
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t end = std::min(text.find(',', start), text.size());
      std::string tok(text.substr(start, end - start));
      tok.erase(std::remove_if(tok.begin(), tok.end(), [](unsigned char c) { return std::isspace(c); }), tok.end());
      if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw PlanMismatch("malformed list '" + std::string(text) + "'");
      }
      out.push_back(std::stoi(tok) - (one_based ? 1 : 0));
      start = end + 1;
    }
  } else {
    for (char c : text) {
      if (!std::isdigit(static_cast<unsigned char>(c))) throw PlanMismatch("malformed list '" + std::string(text) + "'");
      out.push_back((c - '0') - (one_based ? 1 : 0));
    }
  }
  return out;
}

void finalize_experience(Experience& e) {
  e.classes_present.clear();
  for (const auto& p : e.train.patches) e.classes_present.insert(p.class_id);
}

void require_nonempty(const ExperienceStream& s) {
  for (const auto& e : s.experiences) {
    if (e.train.empty() || e.test.empty()) {
      throw InsufficientData("experience " + std::to_string(e.index) + " has an empty " +
                             (e.train.empty() ? "train" : "test") + " set");
    }
  }
}

void single_head_routing(ExperienceStream& s, int n_classes) {
  s.head_sizes = {n_classes};
  s.routing.resize(static_cast<std::size_t>(n_classes));
  for (int c = 0; c < n_classes; ++c) s.routing[c] = {0, c};
}

// Distributes the items of each cell over n parts; the start offset rotates
// so part sizes stay balanced across cells as well as within them.
std::vector<int> cell_partition(const std::vector<std::vector<std::size_t>>& cells, std::size_t total, int n,
                                std::uint64_t seed, std::uint64_t salt) {
  std::vector<int> part(total, -1);
  std::size_t offset = 0;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    auto idx = cells[c];
    Rng rng = make_rng(seed, salt + c);
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) part[idx[k]] = static_cast<int>((k + offset) % n);
    offset += idx.size();
  }
  return part;
}

// Domain-major order, so the rotating offset also balances each domain's
// total per part.
std::vector<std::vector<std::size_t>> class_domain_cells(const Dataset& ds) {
  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& p = ds.patches[i];
    if (!p.domain_id) throw MissingDomain("patch " + p.source_key + " carries no domain id");
    cells[{*p.domain_id, p.class_id}].push_back(i);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto& [key, v] : cells) out.push_back(std::move(v));
  return out;
}

Dataset select(const Dataset& ds, const std::vector<int>& part, int which) {
  Dataset out = ds.empty_like();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (part[i] == which) out.patches.push_back(ds.patches[i]);
  }
  return out;
}

Dataset filter(const Dataset& ds, const auto& pred) {
  Dataset out = ds.empty_like();
  for (const auto& p : ds.patches) {
    if (pred(p)) out.patches.push_back(p);
  }
  return out;
}

}  // namespace

std::string_view to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::data_il: return "data_il";
    case ScenarioKind::domain_il: return "domain_il";
    case ScenarioKind::class_il: return "class_il";
    case ScenarioKind::task_il: return "task_il";
  }
  return "unknown";
}

ScenarioKind parse_scenario_kind(std::string_view name) {
  if (name == "data_il") return ScenarioKind::data_il;
  if (name == "domain_il") return ScenarioKind::domain_il;
  if (name == "class_il") return ScenarioKind::class_il;
  if (name == "task_il") return ScenarioKind::task_il;
  throw ConfigError("unknown scenario kind '" + std::string(name) + "'");
}

LabelTarget ExperienceStream::target(const Patch& p) const {
  if (p.class_id < 0 || static_cast<std::size_t>(p.class_id) >= routing.size()) {
    throw PlanMismatch("class id " + std::to_string(p.class_id) + " is outside the stream label space");
  }
  return routing[static_cast<std::size_t>(p.class_id)];
}

std::vector<int> ExperienceStream::classes_of_head(int head) const {
  std::vector<int> out(static_cast<std::size_t>(head_sizes.at(static_cast<std::size_t>(head))), -1);
  for (std::size_t c = 0; c < routing.size(); ++c) {
    if (routing[c].head == head) out[static_cast<std::size_t>(routing[c].output)] = static_cast<int>(c);
  }
  return out;
}

nlohmann::json ExperienceStream::manifest() const {
  nlohmann::json exps = nlohmann::json::array();
  for (const auto& e : experiences) {
    std::map<std::string, int> domains;
    for (const auto& p : e.train.patches) domains[p.domain_id ? std::to_string(*p.domain_id) : "none"]++;
    nlohmann::json j = {{"index", e.index},
                        {"train_size", e.train.size()},
                        {"test_size", e.test.size()},
                        {"classes", std::vector<int>(e.classes_present.begin(), e.classes_present.end())},
                        {"domains", domains}};
    j["task_id"] = e.task_id ? nlohmann::json(*e.task_id) : nlohmann::json(nullptr);
    exps.push_back(std::move(j));
  }
  return {{"kind", std::string(to_string(kind))},
          {"task_id_at_test", task_id_at_test},
          {"class_names", class_names},
          {"head_sizes", head_sizes},
          {"experiences", exps}};
}

ClassPlan ClassPlan::identity(int n_classes, std::vector<int> grouping) {
  ClassPlan p;
  p.order.resize(static_cast<std::size_t>(n_classes));
  std::iota(p.order.begin(), p.order.end(), 0);
  p.grouping = std::move(grouping);
  return p;
}

ClassPlan ClassPlan::parse(std::string_view order, std::string_view grouping) {
  ClassPlan p;
  p.order = parse_int_list(order, true);
  p.grouping = parse_int_list(grouping, false);
  return p;
}

void ClassPlan::validate(int n_classes) const {
  if (static_cast<int>(order.size()) != n_classes) {
    throw PlanMismatch("class order lists " + std::to_string(order.size()) + " classes, dataset has " +
                       std::to_string(n_classes));
  }
  std::vector<bool> seen(static_cast<std::size_t>(n_classes), false);
  for (int c : order) {
    if (c < 0 || c >= n_classes || seen[static_cast<std::size_t>(c)]) throw PlanMismatch("class order is not a permutation");
    seen[static_cast<std::size_t>(c)] = true;
  }
  int sum = 0;
  for (int g : grouping) {
    if (g < 1) throw PlanMismatch("group sizes must be positive");
    sum += g;
  }
  if (sum != n_classes) throw PlanMismatch("grouping sums to " + std::to_string(sum) + ", expected " + std::to_string(n_classes));
}

std::vector<std::vector<int>> ClassPlan::groups() const {
  std::vector<std::vector<int>> out;
  std::size_t at = 0;
  for (int g : grouping) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(at + g));
    at += static_cast<std::size_t>(g);
  }
  return out;
}

Dataset strip_task_ids(Dataset ds) {
  for (auto& p : ds.patches) p.task_id.reset();
  return ds;
}

ExperienceStream build_data_il(const Dataset& train, const Dataset& test, int n_experiences, std::uint64_t seed) {
  if (n_experiences < 1) throw InsufficientData("n_experiences must be at least 1");
  const auto train_cells = class_domain_cells(train);
  for (const auto& cell : train_cells) {
    if (static_cast<int>(cell.size()) < n_experiences) {
      const auto& p = train.patches[cell.front()];
      throw InsufficientData("cell (class " + std::to_string(p.class_id) + ", domain " + std::to_string(*p.domain_id) +
                             ") has " + std::to_string(cell.size()) + " items for " + std::to_string(n_experiences) +
                             " experiences");
    }
  }
  const auto train_part = cell_partition(train_cells, train.size(), n_experiences, seed, 0xDA7A0000ull);
  const auto test_part = cell_partition(class_domain_cells(test), test.size(), n_experiences, seed, 0xDA7B0000ull);

  ExperienceStream s;
  s.kind = ScenarioKind::data_il;
  s.class_names = train.class_names;
  single_head_routing(s, train.num_classes());
  for (int k = 0; k < n_experiences; ++k) {
    Experience e;
    e.index = k;
    e.train = select(train, train_part, k);
    e.test = select(test, test_part, k);
    finalize_experience(e);
    s.experiences.push_back(std::move(e));
  }
  require_nonempty(s);
  return s;
}

ExperienceStream build_domain_il(const Dataset& train, const Dataset& test, const std::array<int, 5>& order) {
  std::array<int, 5> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::array<int, 5>{1, 2, 3, 4, 5}) throw MissingDomain("domain order must be a permutation of 1..5");
  ExperienceStream s;
  s.kind = ScenarioKind::domain_il;
  s.class_names = train.class_names;
  single_head_routing(s, train.num_classes());
  for (int k = 0; k < 5; ++k) {
    const int d = order[static_cast<std::size_t>(k)];
    auto in_domain = [d](const Patch& p) { return p.domain_id && *p.domain_id == d; };
    Experience e;
    e.index = k;
    e.train = filter(train, in_domain);
    e.test = filter(test, in_domain);
    if (e.train.empty() || e.test.empty()) throw MissingDomain("domain " + std::to_string(d) + " has no data");
    finalize_experience(e);
    s.experiences.push_back(std::move(e));
  }
  return s;
}

ExperienceStream build_class_il(const Dataset& train, const Dataset& test, const ClassPlan& plan) {
  plan.validate(train.num_classes());
  if (test.num_classes() != train.num_classes()) throw PlanMismatch("train and test label spaces differ");
  ExperienceStream s;
  s.kind = ScenarioKind::class_il;
  s.class_names = train.class_names;
  single_head_routing(s, train.num_classes());
  const auto groups = plan.groups();
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const std::set<int> members(groups[k].begin(), groups[k].end());
    auto in_group = [&members](const Patch& p) { return members.count(p.class_id) > 0; };
    Experience e;
    e.index = static_cast<int>(k);
    e.train = filter(train, in_group);
    e.test = filter(test, in_group);
    finalize_experience(e);
    s.experiences.push_back(std::move(e));
  }
  require_nonempty(s);
  return s;
}

ExperienceStream build_task_il(const Dataset& train, const Dataset& test, const ClassPlan& plan) {
  ExperienceStream s = build_class_il(train, test, plan);
  s.kind = ScenarioKind::task_il;
  s.task_id_at_test = true;
  const auto groups = plan.groups();
  s.head_sizes.clear();
  for (std::size_t k = 0; k < groups.size(); ++k) {
    s.head_sizes.push_back(static_cast<int>(groups[k].size()));
    for (std::size_t i = 0; i < groups[k].size(); ++i) {
      s.routing[static_cast<std::size_t>(groups[k][i])] = {static_cast<int>(k), static_cast<int>(i)};
    }
    auto& e = s.experiences[k];
    e.task_id = static_cast<int>(k);
    for (auto& p : e.train.patches) p.task_id = static_cast<int>(k);
    for (auto& p : e.test.patches) p.task_id = static_cast<int>(k);
  }
  return s;
}

Dataset subsample(const Dataset& ds, std::size_t count, std::uint64_t seed) {
  if (count >= ds.size()) return ds;
  const auto by_class = ds.indices_by_class();
  // largest-remainder apportionment keeps class proportions
  std::vector<std::size_t> take(by_class.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainder;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const double exact = static_cast<double>(count) * by_class[c].size() / static_cast<double>(ds.size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[c];
    remainder.emplace_back(-(exact - std::floor(exact)), c);
  }
  std::sort(remainder.begin(), remainder.end());
  for (std::size_t i = 0; assigned < count; ++i, ++assigned) take[remainder[i % remainder.size()].second]++;

  std::vector<bool> keep(ds.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    Rng rng = make_rng(seed, 0x5AB0ull + c);
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < std::min(take[c], idx.size()); ++i) keep[idx[i]] = true;
  }
  Dataset out = ds.empty_like();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (keep[i]) out.patches.push_back(ds.patches[i]);
  }
  return out;
}

Dataset harmonize_tumor_labels(const Dataset& ds, const std::vector<std::string>& tumor_classes) {
  std::vector<int> is_tumor(ds.class_names.size(), 0);
  bool any = false;
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    const std::string name = lower(ds.class_names[c]);
    for (const auto& t : tumor_classes) {
      if (name == lower(t)) {
        is_tumor[c] = 1;
        any = true;
      }
    }
  }
  if (!any) throw LabelSpaceMismatch("dataset has no class matching the tumor class names");
  if (std::all_of(is_tumor.begin(), is_tumor.end(), [](int v) { return v == 1; })) {
    throw LabelSpaceMismatch("dataset has no non-tumor class");
  }
  Dataset out;
  out.class_names = {"normal", "tumor"};
  out.metadata = ds.metadata;
  out.patches = ds.patches;
  for (auto& p : out.patches) p.class_id = is_tumor[static_cast<std::size_t>(p.class_id)];
  return out;
}

ExperienceStream build_two_tumor_domain_il(const Dataset& a_train, const Dataset& a_test, const Dataset& b_train,
                                           const Dataset& b_test, const TwoTumorOptions& options) {
  if (!(options.volume_ratio > 0.0)) throw LabelSpaceMismatch("volume ratio must be positive");
  Dataset at = harmonize_tumor_labels(a_train, options.tumor_classes);
  Dataset ae = harmonize_tumor_labels(a_test, options.tumor_classes);
  Dataset bt = harmonize_tumor_labels(b_train, options.tumor_classes);
  Dataset be = harmonize_tumor_labels(b_test, options.tumor_classes);

  // volume_ratio = |b| / |a|; subsample whichever side is in surplus
  auto n_a = at.size();
  if (static_cast<double>(bt.size()) < options.volume_ratio * static_cast<double>(n_a)) {
    n_a = static_cast<std::size_t>(std::floor(static_cast<double>(bt.size()) / options.volume_ratio));
  }
  const auto n_b = static_cast<std::size_t>(std::llround(options.volume_ratio * static_cast<double>(n_a)));
  if (n_a == 0 || n_b == 0) throw InsufficientData("volume ratio leaves an empty experience");
  at = subsample(at, n_a, derive_seed(options.seed, 0xA));
  bt = subsample(bt, n_b, derive_seed(options.seed, 0xB));

  auto tag = [](Dataset& ds, int domain, const char* prefix) {
    for (auto& p : ds.patches) {
      p.domain_id = domain;
      p.source_key = std::string(prefix) + p.source_key;
    }
  };
  tag(at, 1, "a:");
  tag(ae, 1, "a:");
  tag(bt, 2, "b:");
  tag(be, 2, "b:");

  ExperienceStream s;
  s.kind = ScenarioKind::domain_il;
  s.class_names = {"normal", "tumor"};
  single_head_routing(s, 2);
  std::array<std::pair<Dataset*, Dataset*>, 2> seq{{{&at, &ae}, {&bt, &be}}};
  if (options.order == TumorOrder::b_first) std::swap(seq[0], seq[1]);
  for (int k = 0; k < 2; ++k) {
    Experience e;
    e.index = k;
    e.train = std::move(*seq[static_cast<std::size_t>(k)].first);
    e.test = std::move(*seq[static_cast<std::size_t>(k)].second);
    finalize_experience(e);
    s.experiences.push_back(std::move(e));
  }
  require_nonempty(s);
  return s;
}

}  // namespace histocl::scenario
