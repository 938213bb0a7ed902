#include "histocl/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "histocl/error.hpp"

namespace histocl::strategy {

std::string_view to_string(ClassifierMode mode) {
  switch (mode) {
    case ClassifierMode::head: return "head";
    case ClassifierMode::nearest_mean_of_exemplars: return "nearest_mean_of_exemplars";
    case ClassifierMode::prototypes: return "prototypes";
  }
  return "unknown";
}

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::offline: return "offline";
    case Regime::online: return "online";
    case Regime::online_mini: return "online_mini";
  }
  return "unknown";
}

Regime parse_regime(std::string_view name) {
  if (name == "offline") return Regime::offline;
  if (name == "online") return Regime::online;
  if (name == "online_mini") return Regime::online_mini;
  throw ConfigError("unknown training regime '" + std::string(name) + "'");
}

nn::Batch make_batch(const scenario::ExperienceStream& stream, std::span<const Patch* const> rows) {
  nn::Batch b;
  for (const Patch* p : rows) {
    const auto t = stream.target(*p);
    b.add(*p, t.head, t.output);
  }
  return b;
}

std::vector<float> compute_features(const nn::ParamVector& params, const nn::ModelSpec& spec,
                                    const scenario::ExperienceStream& stream, std::span<const Patch* const> rows,
                                    int chunk) {
  std::vector<float> out;
  out.reserve(rows.size() * static_cast<std::size_t>(spec.feature_dim));
  for (std::size_t at = 0; at < rows.size(); at += static_cast<std::size_t>(chunk)) {
    const auto part = rows.subspan(at, std::min(rows.size() - at, static_cast<std::size_t>(chunk)));
    const auto fwd = nn::forward(params, spec, make_batch(stream, part));
    out.insert(out.end(), fwd.features.begin(), fwd.features.end());
  }
  return out;
}

std::vector<const Patch*> pointers(const Dataset& ds) {
  std::vector<const Patch*> out;
  out.reserve(ds.size());
  for (const auto& p : ds.patches) out.push_back(&p);
  return out;
}

namespace {

std::vector<float> normalized_rows(std::vector<float> feats, int d) {
  for (std::size_t at = 0; at < feats.size(); at += static_cast<std::size_t>(d)) {
    nn::l2_normalize(std::span<float>(feats.data() + at, static_cast<std::size_t>(d)));
  }
  return feats;
}

std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace

// ---------------------------------------------------------------------------
// Fisher

FisherDiag compute_fisher(const nn::ParamVector& params, const nn::ModelSpec& spec, const Dataset& data,
                          const std::function<int(const Patch&)>& head_of, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw ConfigError("fisher needs at least one sample");
  FisherDiag out;
  out.values.assign(params.size(), 0.0f);
  if (data.empty()) return out;

  Rng rng = make_rng(seed, 0xF15E);
  std::vector<std::size_t> picks;
  if (static_cast<std::size_t>(n_samples) <= data.size()) {
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle(idx.begin(), idx.end(), rng);
    picks.assign(idx.begin(), idx.begin() + n_samples);
  } else {
    for (int i = 0; i < n_samples; ++i) picks.push_back(uniform_index(rng, data.size()));
  }

  std::vector<double> acc(params.size(), 0.0);
  for (std::size_t i : picks) {
    const Patch& p = data.patches[i];
    nn::Batch b;
    b.add(p, head_of(p), -1);
    const auto fwd = nn::forward(params, spec, b);
    const std::vector<double> z(fwd.logits[0].begin(), fwd.logits[0].end());
    const auto prob = nn::softmax_t(z, 1.0);
    const double u = uniform(rng, 0.0, 1.0);
    int y = static_cast<int>(prob.size()) - 1;
    double cum = 0.0;
    for (std::size_t o = 0; o < prob.size(); ++o) {
      cum += prob[o];
      if (u < cum) {
        y = static_cast<int>(o);
        break;
      }
    }
    const std::vector<nn::LossTerm> terms{nn::CrossEntropyTerm{{y}, 1.0}};
    const auto step = nn::loss_and_backward(params, spec, b, terms);
    for (std::size_t j = 0; j < acc.size(); ++j) {
      const double g = step.grads[j];
      acc[j] += g * g;
    }
  }
  for (std::size_t j = 0; j < acc.size(); ++j) out.values[j] = static_cast<float>(acc[j] / picks.size());
  out.sample_count = static_cast<int>(picks.size());
  return out;
}

// ---------------------------------------------------------------------------
// herding, projection, prototypes

std::vector<int> herding_select(std::span<const float> features, int n, int d, int m) {
  if (n < 1 || d < 1 || m < 1) throw ShapeMismatch("herding needs n, d, m >= 1");
  if (features.size() != static_cast<std::size_t>(n) * d) throw ShapeMismatch("herding features are not n x d");
  std::vector<double> mu(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) mu[j] += features[static_cast<std::size_t>(i) * d + j];
  }
  for (double& v : mu) v /= n;

  const int count = std::min(m, n);
  std::vector<int> picked;
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  std::vector<double> sum(static_cast<std::size_t>(d), 0.0);
  for (int k = 1; k <= count; ++k) {
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (int j = 0; j < d; ++j) {
        const double diff = mu[j] - (sum[j] + features[static_cast<std::size_t>(i) * d + j]) / k;
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    used[best] = true;
    picked.push_back(best);
    for (int j = 0; j < d; ++j) sum[j] += features[static_cast<std::size_t>(best) * d + j];
  }
  return picked;
}

template <typename Real>
std::vector<Real> agem_project(std::span<const Real> g, std::span<const Real> g_ref) {
  if (g.size() != g_ref.size()) throw ShapeMismatch("agem_project needs equal lengths");
  double dot = 0.0, ref2 = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    dot += static_cast<double>(g[i]) * g_ref[i];
    ref2 += static_cast<double>(g_ref[i]) * g_ref[i];
  }
  std::vector<Real> out(g.begin(), g.end());
  if (dot >= 0.0) return out;
  if (std::sqrt(ref2) <= 1e-12) throw ZeroReference("reference gradient norm is zero");
  const double c = dot / ref2;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<Real>(g[i] - c * g_ref[i]);
  return out;
}

template std::vector<float> agem_project<float>(std::span<const float>, std::span<const float>);
template std::vector<double> agem_project<double>(std::span<const double>, std::span<const double>);

std::vector<float> cope_update_prototype(std::span<const float> p, std::span<const float> z_mean, double alpha) {
  if (p.size() != z_mean.size()) throw ShapeMismatch("prototype and batch mean differ in width");
  std::vector<double> v(p.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = alpha * p[i] + (1.0 - alpha) * z_mean[i];
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  if (norm < 1e-8) throw DegeneratePrototype("prototype update collapsed to zero");
  for (double& x : v) x /= norm;
  return to_float(v);
}

// ---------------------------------------------------------------------------
// ExemplarMemory

std::size_t ExemplarMemory::total() const {
  std::size_t n = 0;
  for (const auto& [key, list] : groups_) n += list.size();
  return n;
}

std::vector<const Patch*> ExemplarMemory::all() const {
  std::vector<const Patch*> out;
  for (const auto& [key, list] : groups_) {
    for (const auto& p : list) out.push_back(&p);
  }
  return out;
}

int ExemplarMemory::quota(std::size_t extra) const {
  const std::size_t groups = groups_.size() + extra;
  if (groups == 0) return budget_;
  return static_cast<int>(static_cast<std::size_t>(budget_) / groups);
}

void ExemplarMemory::truncate(int m) {
  for (auto& [key, list] : groups_) {
    if (static_cast<int>(list.size()) > m) list.resize(static_cast<std::size_t>(std::max(m, 0)));
  }
}

void ExemplarMemory::add_group(Key key, std::vector<Patch> exemplars) {
  if (groups_.count(key)) throw PlanMismatch("exemplar group already present");
  std::set<std::string> keys;
  for (const auto& [k, list] : groups_) {
    for (const auto& p : list) keys.insert(p.source_key);
  }
  for (const auto& p : exemplars) {
    if (!keys.insert(p.source_key).second) throw PlanMismatch("duplicate exemplar " + p.source_key);
  }
  groups_.emplace(key, std::move(exemplars));
}

// ---------------------------------------------------------------------------
// EpisodicBuffer

std::map<int, int> EpisodicBuffer::class_counts() const {
  std::map<int, int> out;
  for (const auto& p : slots_) out[p.class_id]++;
  return out;
}

void EpisodicBuffer::insert(const Patch& p, Rng& rng) {
  ++seen_;
  const std::int64_t seen_c = ++seen_class_[p.class_id];
  if (capacity_ <= 0) return;
  if (static_cast<int>(slots_.size()) < capacity_) {
    slots_.push_back(p);
    return;
  }
  if (mode_ == Mode::reservoir) {
    const auto j = uniform_index(rng, static_cast<std::uint64_t>(seen_));
    if (j < slots_.size()) slots_[j] = p;
    return;
  }
  const auto counts = class_counts();
  int largest = -1, largest_count = -1;
  for (const auto& [c, n] : counts) {
    if (n > largest_count) {
      largest = c;
      largest_count = n;
    }
  }
  const auto own = counts.find(p.class_id);
  const int own_count = own == counts.end() ? 0 : own->second;
  int victim_class = largest;
  std::uint64_t victim_rank = 0;
  if (own_count == largest_count) {
    // the class already holds the most slots: reservoir within the class
    const auto j = uniform_index(rng, static_cast<std::uint64_t>(seen_c));
    if (j >= static_cast<std::uint64_t>(own_count)) return;
    victim_class = p.class_id;
    victim_rank = j;
  } else {
    victim_rank = uniform_index(rng, static_cast<std::uint64_t>(largest_count));
  }
  std::uint64_t rank = 0;
  for (auto& slot : slots_) {
    if (slot.class_id != victim_class) continue;
    if (rank++ == victim_rank) {
      slot = p;
      return;
    }
  }
}

std::vector<const Patch*> EpisodicBuffer::sample(int n, Rng& rng) const {
  std::vector<std::size_t> idx(slots_.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t take = std::min(idx.size(), static_cast<std::size_t>(std::max(n, 0)));
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + uniform_index(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  std::vector<const Patch*> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(&slots_[idx[i]]);
  return out;
}

void EpisodicBuffer::clear() {
  slots_.clear();
  seen_ = 0;
  seen_class_.clear();
}

void EpisodicBuffer::restore(std::vector<Patch> slots, std::int64_t seen, std::map<int, std::int64_t> seen_class) {
  if (static_cast<int>(slots.size()) > capacity_) throw CheckpointError("buffer state exceeds capacity");
  slots_ = std::move(slots);
  seen_ = seen;
  seen_class_ = std::move(seen_class);
}

// ---------------------------------------------------------------------------
// PrototypeStore

void PrototypeStore::set(int class_id, std::span<const float> v) {
  double norm = 0.0;
  for (float x : v) norm += static_cast<double>(x) * x;
  norm = std::sqrt(norm);
  if (norm < 1e-8) throw DegeneratePrototype("cannot normalize a zero prototype");
  std::vector<float> p(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = static_cast<float>(v[i] / norm);
  protos_[class_id] = std::move(p);
}

void PrototypeStore::update(int class_id, std::span<const float> z_mean) {
  auto& p = protos_.at(class_id);
  p = cope_update_prototype(p, z_mean, alpha_);
}

// ---------------------------------------------------------------------------
// Strategy defaults

void Strategy::on_experience_start(int, const scenario::Experience&, const nn::ParamVector&) {}

std::vector<const Patch*> Strategy::training_set(int, const scenario::Experience& exp) { return pointers(exp.train); }

int Strategy::extend_batch(nn::Batch&, std::vector<const Patch*>&, Rng&) { return 0; }

std::vector<nn::LossTerm> Strategy::loss_terms(const nn::Batch& batch, std::span<const Patch* const>,
                                               const nn::ParamVector&) {
  return {cross_entropy(batch)};
}

void Strategy::transform_gradient(std::vector<float>&, const nn::ParamVector&, Rng&) {}

void Strategy::after_step(const nn::Batch&, std::span<const Patch* const>, int, const nn::StepResult<float>&, Rng&) {}

void Strategy::on_experience_end(int, const scenario::Experience&, const nn::ParamVector&, Rng&) {}

std::vector<nn::ClassMean> Strategy::class_means(const nn::ParamVector&) const { return {}; }

void Strategy::save_state(nn::Checkpoint& ckpt) const { ckpt.metadata["strategy"] = name(); }

void Strategy::load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>&) {
  if (ckpt.metadata.value("strategy", std::string()) != name()) {
    throw CheckpointError("checkpoint holds state for strategy '" + ckpt.metadata.value("strategy", std::string()) +
                          "', not '" + name() + "'");
  }
}

nn::CrossEntropyTerm Strategy::cross_entropy(const nn::Batch& batch) const { return {batch.labels, 1.0}; }

namespace {

nlohmann::json keys_of(const std::vector<Patch>& list) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : list) out.push_back(p.source_key);
  return out;
}

std::vector<Patch> resolve_keys(const nlohmann::json& keys,
                                const std::function<const Patch*(const std::string&)>& resolve) {
  std::vector<Patch> out;
  for (const auto& k : keys) {
    const Patch* p = resolve(k.get<std::string>());
    if (!p) throw CheckpointError("unknown source key " + k.get<std::string>());
    out.push_back(*p);
  }
  return out;
}

nlohmann::json buffer_json(const EpisodicBuffer& buf) {
  nlohmann::json seen = nlohmann::json::object();
  for (const auto& [c, n] : buf.class_seen()) seen[std::to_string(c)] = n;
  return {{"slots", keys_of(buf.slots())}, {"seen", buf.seen()}, {"seen_per_class", seen}};
}

void restore_buffer(EpisodicBuffer& buf, const nlohmann::json& j,
                    const std::function<const Patch*(const std::string&)>& resolve) {
  std::map<int, std::int64_t> seen;
  for (const auto& [c, n] : j.at("seen_per_class").items()) seen[std::stoi(c)] = n.get<std::int64_t>();
  buf.restore(resolve_keys(j.at("slots"), resolve), j.at("seen").get<std::int64_t>(), std::move(seen));
}

const std::vector<float>& array_at(const nn::Checkpoint& ckpt, const std::string& name) {
  const auto it = ckpt.arrays.find(name);
  if (it == ckpt.arrays.end()) throw CheckpointError("checkpoint lacks array " + name);
  return it->second;
}

std::string indexed(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s.%03zu", prefix, i);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Joint

std::vector<const Patch*> Joint::training_set(int k, const scenario::Experience&) {
  std::vector<const Patch*> out;
  for (int i = 0; i <= k; ++i) {
    const auto part = pointers(stream().experiences.at(static_cast<std::size_t>(i)).train);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// EWC

std::vector<nn::LossTerm> Ewc::loss_terms(const nn::Batch& batch, std::span<const Patch* const>,
                                          const nn::ParamVector&) {
  std::vector<nn::LossTerm> terms{cross_entropy(batch)};
  if (lambda_ > 0.0) {
    for (const auto& a : anchors_) terms.push_back(nn::EwcPenaltyTerm{a.theta, a.fisher, lambda_});
  }
  return terms;
}

void Ewc::on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng&) {
  const auto& s = stream();
  auto fisher = compute_fisher(params, spec(), exp.train, [&s](const Patch& p) { return s.target(p).head; },
                               fisher_samples_, derive_seed(ctx_.seed, 0xF1500ull + static_cast<std::uint64_t>(k)));
  anchors_.push_back({std::make_shared<const std::vector<float>>(params.values),
                      std::make_shared<const std::vector<float>>(std::move(fisher.values))});
}

void Ewc::save_state(nn::Checkpoint& ckpt) const {
  Strategy::save_state(ckpt);
  ckpt.metadata["ewc_anchors"] = anchors_.size();
  for (std::size_t i = 0; i < anchors_.size(); ++i) {
    ckpt.arrays[indexed("ewc.theta", i)] = *anchors_[i].theta;
    ckpt.arrays[indexed("ewc.fisher", i)] = *anchors_[i].fisher;
  }
}

void Ewc::load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) {
  Strategy::load_state(ckpt, resolve);
  anchors_.clear();
  const auto n = ckpt.metadata.at("ewc_anchors").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) {
    anchors_.push_back({std::make_shared<const std::vector<float>>(array_at(ckpt, indexed("ewc.theta", i))),
                        std::make_shared<const std::vector<float>>(array_at(ckpt, indexed("ewc.fisher", i)))});
  }
}

std::vector<nn::LossTerm> OnlineEwc::loss_terms(const nn::Batch& batch, std::span<const Patch* const>,
                                                const nn::ParamVector&) {
  std::vector<nn::LossTerm> terms{cross_entropy(batch)};
  if (lambda_ > 0.0 && theta_) terms.push_back(nn::EwcPenaltyTerm{theta_, fisher_, lambda_});
  return terms;
}

void OnlineEwc::on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng&) {
  const auto& s = stream();
  auto fresh = compute_fisher(params, spec(), exp.train, [&s](const Patch& p) { return s.target(p).head; },
                              fisher_samples_, derive_seed(ctx_.seed, 0xF1500ull + static_cast<std::uint64_t>(k)));
  std::vector<float> f = std::move(fresh.values);
  if (fisher_) {
    for (std::size_t j = 0; j < f.size(); ++j) f[j] = static_cast<float>(gamma_ * (*fisher_)[j] + f[j]);
  }
  fisher_ = std::make_shared<const std::vector<float>>(std::move(f));
  theta_ = std::make_shared<const std::vector<float>>(params.values);
}

void OnlineEwc::save_state(nn::Checkpoint& ckpt) const {
  Strategy::save_state(ckpt);
  if (theta_) {
    ckpt.arrays["online_ewc.theta"] = *theta_;
    ckpt.arrays["online_ewc.fisher"] = *fisher_;
  }
}

void OnlineEwc::load_state(const nn::Checkpoint& ckpt,
                           const std::function<const Patch*(const std::string&)>& resolve) {
  Strategy::load_state(ckpt, resolve);
  theta_.reset();
  fisher_.reset();
  if (ckpt.arrays.count("online_ewc.theta")) {
    theta_ = std::make_shared<const std::vector<float>>(array_at(ckpt, "online_ewc.theta"));
    fisher_ = std::make_shared<const std::vector<float>>(array_at(ckpt, "online_ewc.fisher"));
  }
}

// ---------------------------------------------------------------------------
// Teacher / LwF

void Teacher::record_outputs(const scenario::ExperienceStream& stream, const std::set<int>& classes) {
  for (int c : classes) {
    const auto t = stream.routing.at(static_cast<std::size_t>(c));
    outputs_[t.head].insert(t.output);
  }
}

std::vector<nn::LossTerm> Teacher::terms(const nn::ModelSpec& spec, const nn::Batch& batch, double weight,
                                         double temperature) const {
  std::vector<nn::LossTerm> out;
  if (!active()) return out;
  const auto fwd = nn::forward(*params_, spec, batch);
  for (const auto& [head, outs] : outputs_) {
    nn::DistillationTerm kd;
    kd.head_id = head;
    kd.teacher_logits = nn::head_logits(*params_, spec, fwd.features, head);
    kd.outputs.assign(outs.begin(), outs.end());
    kd.temperature = temperature;
    kd.weight = weight;
    out.emplace_back(std::move(kd));
  }
  return out;
}

nlohmann::json Teacher::outputs_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [head, outs] : outputs_) j[std::to_string(head)] = std::vector<int>(outs.begin(), outs.end());
  return j;
}

void Teacher::restore_outputs(const nlohmann::json& j) {
  outputs_.clear();
  for (const auto& [head, outs] : j.items()) {
    const auto v = outs.get<std::vector<int>>();
    outputs_[std::stoi(head)] = std::set<int>(v.begin(), v.end());
  }
}

void Lwf::on_experience_start(int k, const scenario::Experience&, const nn::ParamVector& params) {
  if (k >= 1) teacher_.freeze(params);
}

std::vector<nn::LossTerm> Lwf::loss_terms(const nn::Batch& batch, std::span<const Patch* const>,
                                          const nn::ParamVector&) {
  std::vector<nn::LossTerm> terms{cross_entropy(batch)};
  if (lambda_o_ > 0.0) {
    for (auto& t : teacher_.terms(spec(), batch, lambda_o_, temperature_)) terms.push_back(std::move(t));
  }
  return terms;
}

void Lwf::on_experience_end(int, const scenario::Experience& exp, const nn::ParamVector&, Rng&) {
  teacher_.record_outputs(stream(), exp.classes_present);
}

void Lwf::save_state(nn::Checkpoint& ckpt) const {
  Strategy::save_state(ckpt);
  ckpt.metadata["teacher_outputs"] = teacher_.outputs_json();
}

void Lwf::load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) {
  Strategy::load_state(ckpt, resolve);
  teacher_.restore_outputs(ckpt.metadata.at("teacher_outputs"));
}

// ---------------------------------------------------------------------------
// iCaRL

void Icarl::on_experience_start(int k, const scenario::Experience&, const nn::ParamVector& params) {
  if (k >= 1) teacher_.freeze(params);
}

std::vector<const Patch*> Icarl::training_set(int, const scenario::Experience& exp) {
  auto rows = pointers(exp.train);
  const auto mem = memory_.all();
  rows.insert(rows.end(), mem.begin(), mem.end());
  return rows;
}

std::vector<nn::LossTerm> Icarl::loss_terms(const nn::Batch& batch, std::span<const Patch* const>,
                                            const nn::ParamVector&) {
  std::vector<nn::LossTerm> terms{cross_entropy(batch)};
  if (lambda_o_ > 0.0) {
    for (auto& t : teacher_.terms(spec(), batch, lambda_o_, temperature_)) terms.push_back(std::move(t));
  }
  return terms;
}

void Icarl::on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng&) {
  teacher_.record_outputs(stream(), exp.classes_present);
  if (memory_.budget() <= 0) return;
  const auto by_class = exp.train.indices_by_class();
  std::vector<int> fresh;
  for (int c : exp.classes_present) fresh.push_back(c);
  const int m = memory_.quota(fresh.size());
  if (m < 1) {
    throw BudgetTooSmall("memory of " + std::to_string(memory_.budget()) + " cannot hold one exemplar for each of " +
                         std::to_string(memory_.group_count() + fresh.size()) + " groups");
  }
  memory_.truncate(m);
  const int d = spec().feature_dim;
  for (int c : fresh) {
    std::vector<const Patch*> rows;
    for (std::size_t i : by_class.at(static_cast<std::size_t>(c))) rows.push_back(&exp.train.patches[i]);
    const auto feats = normalized_rows(compute_features(params, spec(), stream(), rows, ctx_.eval_batch), d);
    const auto pick = herding_select(feats, static_cast<int>(rows.size()), d, m);
    std::vector<Patch> chosen;
    for (int i : pick) chosen.push_back(*rows[static_cast<std::size_t>(i)]);
    memory_.add_group({c, k}, std::move(chosen));
  }
}

std::vector<nn::ClassMean> Icarl::class_means(const nn::ParamVector& params) const {
  std::map<int, std::vector<const Patch*>> per_class;
  for (const auto& [key, list] : memory_.groups()) {
    for (const auto& p : list) per_class[key.class_id].push_back(&p);
  }
  const int d = spec().feature_dim;
  std::vector<nn::ClassMean> out;
  for (const auto& [c, rows] : per_class) {
    if (rows.empty()) continue;
    const auto feats = normalized_rows(compute_features(params, spec(), stream(), rows, ctx_.eval_batch), d);
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (int j = 0; j < d; ++j) mean[j] += feats[i * d + j];
    }
    std::vector<float> m(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) m[j] = static_cast<float>(mean[j] / rows.size());
    nn::l2_normalize(m);
    out.push_back({c, std::move(m)});
  }
  return out;
}

void Icarl::save_state(nn::Checkpoint& ckpt) const {
  Strategy::save_state(ckpt);
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& [key, list] : memory_.groups()) {
    groups.push_back({{"class", key.class_id}, {"experience", key.experience}, {"keys", keys_of(list)}});
  }
  ckpt.metadata["exemplars"] = groups;
  ckpt.metadata["teacher_outputs"] = teacher_.outputs_json();
}

void Icarl::load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) {
  Strategy::load_state(ckpt, resolve);
  memory_.clear();
  for (const auto& g : ckpt.metadata.at("exemplars")) {
    memory_.add_group({g.at("class").get<int>(), g.at("experience").get<int>()}, resolve_keys(g.at("keys"), resolve));
  }
  teacher_.restore_outputs(ckpt.metadata.at("teacher_outputs"));
}

// ---------------------------------------------------------------------------
// A-GEM

void Agem::transform_gradient(std::vector<float>& grads, const nn::ParamVector& params, Rng& rng) {
  if (buffer_.empty()) return;
  const auto rows = buffer_.sample(ref_batch_, rng);
  const nn::Batch ref = make_batch(stream(), rows);
  const std::vector<nn::LossTerm> terms{cross_entropy(ref)};
  const auto step = nn::loss_and_backward(params, spec(), ref, terms);
  auto out = agem_project<float>(grads, step.grads);
  if (out != grads) ++projections_;
  grads = std::move(out);
}

void Agem::on_experience_end(int, const scenario::Experience& exp, const nn::ParamVector&, Rng& rng) {
  for (const auto& p : exp.train.patches) buffer_.insert(p, rng);
}

void Agem::save_state(nn::Checkpoint& ckpt) const {
  Strategy::save_state(ckpt);
  ckpt.metadata["buffer"] = buffer_json(buffer_);
}

void Agem::load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) {
  Strategy::load_state(ckpt, resolve);
  restore_buffer(buffer_, ckpt.metadata.at("buffer"), resolve);
}

// ---------------------------------------------------------------------------
// CoPE

int Cope::extend_batch(nn::Batch& batch, std::vector<const Patch*>& rows, Rng& rng) {
  if (buffer_.empty()) return 0;
  const auto replay = buffer_.sample(batch.size(), rng);
  for (const Patch* p : replay) {
    const auto t = stream().target(*p);
    batch.add(*p, t.head, t.output);
    rows.push_back(p);
  }
  return static_cast<int>(replay.size());
}

std::vector<nn::LossTerm> Cope::loss_terms(const nn::Batch& batch, std::span<const Patch* const> rows,
                                           const nn::ParamVector& params) {
  const int d = spec().feature_dim;
  std::set<int> missing;
  for (const Patch* p : rows) {
    if (!store_.contains(p->class_id)) missing.insert(p->class_id);
  }
  if (!missing.empty()) {
    // unseen classes start at the normalized mean of their batch features
    const auto feats = normalized_rows(nn::forward(params, spec(), batch).features, d);
    for (int c : missing) {
      std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i]->class_id != c) continue;
        for (int j = 0; j < d; ++j) mean[j] += feats[i * d + j];
      }
      double norm = 0.0;
      for (double v : mean) norm += v * v;
      if (norm < 1e-16) {
        Rng r = make_rng(ctx_.seed, 0xC0BEull + static_cast<std::uint64_t>(c));
        for (double& v : mean) v = std::abs(normal(r, 0.0, 1.0));
      }
      store_.set(c, to_float(mean));
    }
    track_norms();
  }
  nn::PrototypeTerm ppp;
  ppp.tau = store_.tau();
  proto_ids_.clear();
  std::map<int, int> index;
  for (const auto& [c, p] : store_.prototypes()) {
    index[c] = static_cast<int>(proto_ids_.size());
    proto_ids_.push_back(c);
    ppp.prototypes.insert(ppp.prototypes.end(), p.begin(), p.end());
  }
  for (const Patch* p : rows) ppp.targets.push_back(index.at(p->class_id));
  return {std::move(ppp)};
}

void Cope::after_step(const nn::Batch&, std::span<const Patch* const> rows, int new_rows,
                      const nn::StepResult<float>& step, Rng& rng) {
  const int d = spec().feature_dim;
  const auto feats = normalized_rows(step.features, d);
  std::map<int, std::pair<std::vector<double>, int>> sums;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& [sum, n] = sums[rows[i]->class_id];
    if (sum.empty()) sum.assign(static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) sum[j] += feats[i * d + j];
    ++n;
  }
  for (auto& [c, entry] : sums) {
    std::vector<float> mean(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) mean[j] = static_cast<float>(entry.first[j] / entry.second);
    store_.update(c, mean);
  }
  track_norms();
  for (int i = 0; i < new_rows; ++i) buffer_.insert(*rows[static_cast<std::size_t>(i)], rng);
}

std::vector<nn::ClassMean> Cope::class_means(const nn::ParamVector&) const {
  std::vector<nn::ClassMean> out;
  for (const auto& [c, p] : store_.prototypes()) out.push_back({c, p});
  return out;
}

void Cope::track_norms() {
  for (const auto& [c, p] : store_.prototypes()) {
    double n = 0.0;
    for (float v : p) n += static_cast<double>(v) * v;
    n = std::sqrt(n);
    min_norm_ = std::min(min_norm_, n);
    max_norm_ = std::max(max_norm_, n);
  }
}

void Cope::save_state(nn::Checkpoint& ckpt) const {
  Strategy::save_state(ckpt);
  ckpt.metadata["buffer"] = buffer_json(buffer_);
  std::vector<int> ids;
  std::vector<float> flat;
  for (const auto& [c, p] : store_.prototypes()) {
    ids.push_back(c);
    flat.insert(flat.end(), p.begin(), p.end());
  }
  ckpt.metadata["prototype_classes"] = ids;
  ckpt.arrays["cope.prototypes"] = flat;
}

void Cope::load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) {
  Strategy::load_state(ckpt, resolve);
  restore_buffer(buffer_, ckpt.metadata.at("buffer"), resolve);
  const auto ids = ckpt.metadata.at("prototype_classes").get<std::vector<int>>();
  const auto& flat = array_at(ckpt, "cope.prototypes");
  const std::size_t d = static_cast<std::size_t>(ckpt.spec.feature_dim);
  if (flat.size() != ids.size() * d) throw CheckpointError("prototype array does not match class list");
  store_.clear();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    store_.set(ids[i], std::span<const float>(flat.data() + i * d, d));
  }
}

// ---------------------------------------------------------------------------
// configuration

namespace {

const std::map<std::string, std::set<std::string>>& allowed_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"finetune", {"name"}},
      {"joint", {"name"}},
      {"ewc", {"name", "lambda", "fisher_samples"}},
      {"online_ewc", {"name", "lambda", "gamma", "fisher_samples"}},
      {"lwf", {"name", "lambda_o", "temperature"}},
      {"icarl", {"name", "memory", "lambda_o", "temperature"}},
      {"agem", {"name", "capacity", "ref_batch"}},
      {"cope", {"name", "capacity", "alpha", "tau"}},
  };
  return keys;
}

int resolved_capacity(const StrategyParams& p) {
  if (p.capacity >= 0) return p.capacity;
  return p.name == "cope" ? 300 : 500;
}

}  // namespace

std::vector<std::string> strategy_names() {
  return {"finetune", "joint", "ewc", "online_ewc", "lwf", "icarl", "agem", "cope"};
}

StrategyParams StrategyParams::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("strategy section must be an object");
  StrategyParams p;
  p.name = j.value("name", std::string("finetune"));
  const auto it = allowed_keys().find(p.name);
  if (it == allowed_keys().end()) throw ConfigError("unknown strategy '" + p.name + "'");
  for (const auto& [key, value] : j.items()) {
    if (!it->second.count(key)) throw ConfigError("strategy '" + p.name + "' does not take key '" + key + "'");
  }
  try {
    p.lambda = j.value("lambda", p.lambda);
    p.gamma = j.value("gamma", p.gamma);
    p.lambda_o = j.value("lambda_o", p.lambda_o);
    p.temperature = j.value("temperature", p.temperature);
    p.memory = j.value("memory", p.memory);
    p.capacity = j.value("capacity", p.capacity);
    p.ref_batch = j.value("ref_batch", p.ref_batch);
    p.alpha = j.value("alpha", p.alpha);
    p.tau = j.value("tau", p.tau);
    p.fisher_samples = j.value("fisher_samples", p.fisher_samples);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("strategy section: ") + e.what());
  }
  return p;
}

nlohmann::json StrategyParams::to_json() const {
  nlohmann::json j = {{"name", name}};
  const auto& keys = allowed_keys().at(name);
  auto put = [&](const char* key, const nlohmann::json& v) {
    if (keys.count(key)) j[key] = v;
  };
  put("lambda", lambda);
  put("gamma", gamma);
  put("lambda_o", lambda_o);
  put("temperature", temperature);
  put("memory", memory);
  put("capacity", resolved_capacity(*this));
  put("ref_batch", ref_batch);
  put("alpha", alpha);
  put("tau", tau);
  put("fisher_samples", fisher_samples);
  return j;
}

std::unique_ptr<Strategy> make_strategy(const StrategyParams& p) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  const int capacity = resolved_capacity(p);
  if (p.name == "finetune") return std::make_unique<Finetune>();
  if (p.name == "joint") return std::make_unique<Joint>();
  if (p.name == "ewc" || p.name == "online_ewc") {
    require(p.lambda >= 0.0, "lambda must be >= 0");
    require(p.fisher_samples >= 1, "fisher_samples must be >= 1");
    if (p.name == "ewc") return std::make_unique<Ewc>(p.lambda, p.fisher_samples);
    require(p.gamma >= 0.0 && p.gamma <= 1.0, "gamma must lie in [0,1]");
    return std::make_unique<OnlineEwc>(p.lambda, p.gamma, p.fisher_samples);
  }
  if (p.name == "lwf" || p.name == "icarl") {
    require(p.lambda_o >= 0.0, "lambda_o must be >= 0");
    require(p.temperature > 0.0, "temperature must be > 0");
    if (p.name == "lwf") return std::make_unique<Lwf>(p.lambda_o, p.temperature);
    require(p.memory >= 0, "memory must be >= 0");
    return std::make_unique<Icarl>(p.memory, p.lambda_o, p.temperature);
  }
  if (p.name == "agem") {
    require(p.ref_batch >= 1, "ref_batch must be >= 1");
    require(capacity == 0 || capacity >= p.ref_batch, "capacity must be 0 or >= ref_batch");
    return std::make_unique<Agem>(capacity, p.ref_batch);
  }
  if (p.name == "cope") {
    require(capacity >= 1, "capacity must be >= 1");
    require(p.alpha > 0.0 && p.alpha < 1.0, "alpha must lie in (0,1)");
    require(p.tau > 0.0, "tau must be > 0");
    return std::make_unique<Cope>(capacity, p.alpha, p.tau);
  }
  throw ConfigError("unknown strategy '" + p.name + "'");
}

}  // namespace histocl::strategy

namespace histocl::strategy {

nlohmann::json Icarl::diagnostics() const {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [key, list] : memory_.groups()) {
    auto& slot = per_class[std::to_string(key.class_id)];
    slot = slot.is_null() ? static_cast<int>(list.size()) : slot.get<int>() + static_cast<int>(list.size());
  }
  return {{"memory_budget", memory_.budget()},
          {"memory_total", memory_.total()},
          {"memory_groups", memory_.group_count()},
          {"memory_per_class", per_class}};
}

nlohmann::json Agem::diagnostics() const {
  return {{"buffer_capacity", buffer_.capacity()}, {"buffer_size", buffer_.size()}, {"projections", projections_}};
}

nlohmann::json Cope::diagnostics() const {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [c, n] : buffer_.class_counts()) counts[std::to_string(c)] = n;
  nlohmann::json seen = nlohmann::json::object();
  for (const auto& [c, n] : buffer_.class_seen()) seen[std::to_string(c)] = n;
  return {{"buffer_capacity", buffer_.capacity()},
          {"buffer_size", buffer_.size()},
          {"buffer_per_class", counts},
          {"buffer_seen_per_class", seen},
          {"prototypes", store_.prototypes().size()},
          {"prototype_norm_min", min_norm_},
          {"prototype_norm_max", max_norm_}};
}

}  // namespace histocl::strategy
