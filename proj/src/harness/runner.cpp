#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "histocl/error.hpp"
#include "histocl/harness.hpp"
#include "histocl/nn/network.hpp"
#include "histocl/stain.hpp"

namespace histocl::harness {

using scenario::ExperienceStream;
using scenario::ScenarioKind;

// ---------------------------------------------------------------------------
// data and streams

Dataset load_source(const DataConfig& cfg) {
  Dataset ds;
  if (cfg.source == "synth") {
    ds = data::synth_generate(cfg.synth.classes, cfg.synth.per_class, cfg.synth.side, cfg.synth.seed);
  } else if (cfg.source == "folder") {
    std::optional<std::vector<std::string>> expected;
    if (!cfg.classes.empty()) expected = cfg.classes;
    ds = data::load_folder(cfg.root, expected);
  } else if (cfg.source == "augmented_folder") {
    ds = data::load_augmented_folder(cfg.root);
  } else {
    throw ConfigError("unknown data source '" + cfg.source + "'");
  }
  if (cfg.side > 0) {
    for (auto& p : ds.patches) p = data::downscale(p, cfg.side);
  }
  if (cfg.augment) ds = stain::build_augmented_dataset(ds, stain::default_domain_specs(), cfg.augment_seed);
  return ds;
}

PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData out;
  out.main = data::split(load_source(cfg.data), cfg.data.split);
  if (cfg.scenario.two_tumor) {
    const auto& second = cfg.scenario.two_tumor->second;
    out.second = data::split(load_source(second), second.split);
  }
  return out;
}

namespace {

scenario::ClassPlan class_plan(const ScenarioConfig& s, int n_classes) {
  scenario::ClassPlan plan;
  if (s.class_order.empty()) {
    plan.order.resize(static_cast<std::size_t>(n_classes));
    std::iota(plan.order.begin(), plan.order.end(), 0);
  } else {
    plan.order = scenario::ClassPlan::parse(s.class_order, "1").order;
  }
  if (s.grouping.empty()) {
    for (int left = n_classes; left > 0; left -= 2) plan.grouping.push_back(std::min(left, 2));
  } else {
    plan.grouping = scenario::ClassPlan::parse("1", s.grouping).grouping;
  }
  plan.validate(n_classes);
  return plan;
}

}  // namespace

ExperienceStream build_stream(const RunConfig& cfg, const PreparedData& data, std::uint64_t seed, bool validation) {
  const Dataset& train = data.main.train;
  const Dataset& test = validation ? data.main.val : data.main.test;
  const auto& s = cfg.scenario;
  if (s.two_tumor) {
    if (!data.second) throw ConfigError("two_tumor stream needs the second dataset");
    scenario::TwoTumorOptions opt;
    opt.order = s.two_tumor->order;
    opt.volume_ratio = s.two_tumor->volume_ratio;
    opt.seed = seed;
    opt.tumor_classes = s.two_tumor->tumor_classes;
    return scenario::build_two_tumor_domain_il(train, test, data.second->train,
                                               validation ? data.second->val : data.second->test, opt);
  }
  switch (s.kind) {
    case ScenarioKind::data_il: return scenario::build_data_il(train, test, s.n_experiences, seed);
    case ScenarioKind::domain_il: return scenario::build_domain_il(train, test, s.domain_order);
    case ScenarioKind::class_il: return scenario::build_class_il(train, test, class_plan(s, train.num_classes()));
    case ScenarioKind::task_il: return scenario::build_task_il(train, test, class_plan(s, train.num_classes()));
  }
  throw ConfigError("unsupported scenario");
}

nn::ModelSpec model_spec_for(const RunConfig& cfg, const ExperienceStream& stream, int input_side, std::uint64_t seed) {
  nn::ModelSpec spec;
  spec.input_side = input_side;
  spec.conv_blocks = cfg.model.blocks;
  spec.feature_dim = cfg.model.blocks.back().out_channels;
  for (std::size_t h = 0; h < stream.head_sizes.size(); ++h) {
    spec.heads.push_back({static_cast<int>(h), stream.head_sizes[h]});
  }
  spec.init_seed = derive_seed(seed, 0x1417);
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// evaluation and metrics

EvalCount evaluate(const nn::ParamVector& params, const nn::ModelSpec& spec, const ExperienceStream& stream,
                   const Dataset& test, strategy::ClassifierMode mode, std::span<const nn::ClassMean> means,
                   int eval_batch, std::span<const int> seen_classes) {
  if (mode != strategy::ClassifierMode::head && means.empty()) mode = strategy::ClassifierMode::head;
  const int d = spec.feature_dim;
  // allowed[head][output]
  std::vector<std::vector<bool>> allowed;
  for (std::size_t h = 0; h < stream.head_sizes.size(); ++h) {
    allowed.emplace_back(static_cast<std::size_t>(stream.head_sizes[h]), seen_classes.empty());
  }
  for (int c : seen_classes) {
    const auto t = stream.routing.at(static_cast<std::size_t>(c));
    allowed[static_cast<std::size_t>(t.head)][static_cast<std::size_t>(t.output)] = true;
  }
  EvalCount count;
  const auto rows = strategy::pointers(test);
  for (std::size_t at = 0; at < rows.size(); at += static_cast<std::size_t>(eval_batch)) {
    const auto part =
        std::span<const Patch* const>(rows).subspan(at, std::min(rows.size() - at, static_cast<std::size_t>(eval_batch)));
    const nn::Batch batch = strategy::make_batch(stream, part);
    auto fwd = nn::forward(params, spec, batch);
    for (int b = 0; b < batch.size(); ++b) {
      bool hit = false;
      if (mode == strategy::ClassifierMode::head) {
        const auto& lg = fwd.logits[b];
        const auto& ok = allowed[spec.head_index(batch.heads[b])];
        int best = -1;
        for (std::size_t o = 0; o < lg.size(); ++o) {
          if (ok[o] && (best < 0 || lg[o] > lg[static_cast<std::size_t>(best)])) best = static_cast<int>(o);
        }
        hit = best >= 0 && best == batch.labels[b];
      } else {
        std::span<float> f(fwd.features.data() + static_cast<std::size_t>(b) * d, static_cast<std::size_t>(d));
        nn::l2_normalize(f);
        std::vector<nn::ClassMean> candidates;
        for (const auto& m : means) {
          if (!stream.task_id_at_test || stream.routing.at(static_cast<std::size_t>(m.class_id)).head == batch.heads[b]) {
            candidates.push_back(m);
          }
        }
        hit = !candidates.empty() && nn::nearest_mean_classify(f, candidates) == part[b]->class_id;
      }
      count.correct += hit ? 1 : 0;
      ++count.total;
    }
  }
  return count;
}

namespace {

double round12(double x) { return std::round(x * 1e12) / 1e12; }

}  // namespace

Metrics compute_metrics(const AccMatrix& r, std::span<const double> chance) {
  const std::size_t T = r.size();
  if (T == 0) throw ShapeMismatch("accuracy matrix is empty");
  for (const auto& row : r) {
    if (row.size() != T) throw ShapeMismatch("accuracy matrix is not square");
  }
  if (chance.size() != T) throw ShapeMismatch("chance levels must have one entry per experience");
  Metrics m;
  double acc = 0.0;
  for (std::size_t j = 0; j < T; ++j) acc += r[T - 1][j];
  m.acc = round12(acc / static_cast<double>(T));
  if (T >= 2) {
    double bwt = 0.0, fwt = 0.0;
    for (std::size_t j = 0; j + 1 < T; ++j) bwt += r[T - 1][j] - r[j][j];
    for (std::size_t j = 1; j < T; ++j) fwt += r[j - 1][j] - chance[j];
    m.bwt = round12(bwt / static_cast<double>(T - 1));
    m.fwt = round12(fwt / static_cast<double>(T - 1));
  }
  return m;
}

std::vector<double> chance_levels(const ExperienceStream& stream) {
  std::vector<double> out;
  for (const auto& e : stream.experiences) {
    out.push_back(e.classes_present.empty() ? 0.0 : 1.0 / static_cast<double>(e.classes_present.size()));
  }
  return out;
}

Summary aggregate(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

// ---------------------------------------------------------------------------
// running

SeedResult run_seed(const RunConfig& cfg, const PreparedData& data, std::uint64_t seed, const RunHooks& hooks) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  const ExperienceStream stream = build_stream(cfg, data, seed, false);
  std::optional<ExperienceStream> val_stream;
  if (!data.main.val.empty()) {
    try {
      val_stream = build_stream(cfg, data, seed, true);
    } catch (const InsufficientData&) {
      val_stream.reset();
    }
  }
  const int side = data.main.train.patches.at(0).width;
  const nn::ModelSpec spec = model_spec_for(cfg, stream, side, seed);
  nn::ParamVector params = nn::init_model(spec);

  auto strat = strategy::make_strategy(cfg.strategy);
  strat->bind({&stream, &spec, seed, cfg.train.eval_batch});
  nn::OptimizerState opt;
  opt.lr = cfg.train.lr;
  opt.momentum = cfg.train.momentum;
  opt.weight_decay = cfg.train.weight_decay;
  opt.schedule = cfg.train.schedule;

  const strategy::Regime regime = cfg.effective_regime();
  const int epochs = cfg.effective_epochs();
  const std::size_t T = stream.size();
  const int B = cfg.train.batch_size;

  SeedResult res;
  res.seed = seed;
  res.chance = chance_levels(stream);
  res.acc_matrix.assign(T, std::vector<double>(T, 0.0));
  res.correct.assign(T, std::vector<std::size_t>(T, 0));
  for (const auto& e : stream.experiences) res.test_sizes.push_back(e.test.size());
  std::set<int> seen;

  for (std::size_t k = 0; k < T; ++k) {
    const auto t_exp = clock::now();
    const auto& exp = stream.experiences[k];
    const int ki = static_cast<int>(k);
    ExperienceLog log;
    log.index = ki;
    log.epochs = epochs;
    int step_no = -1;
    try {
      strat->on_experience_start(ki, exp, params);
      const std::vector<const Patch*> train_rows = strat->training_set(ki, exp);
      const std::size_t n = train_rows.size();
      log.train_set_size = n;
      opt.reset();
      Rng shuffle_rng = make_rng(seed, 0x5A0F0000ull + k);
      Rng strategy_rng = make_rng(seed, 0x57A70000ull + k);
      Rng end_rng = make_rng(seed, 0xE4D00000ull + k);
      std::vector<int> visits(n, 0);
      double loss_sum = 0.0;
      const std::size_t chunk = regime == strategy::Regime::online_mini ? strategy::kMiniExperienceSize : std::max<std::size_t>(n, 1);

      for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
          const std::size_t c1 = std::min(n, c0 + chunk);
          if (epoch == 0 && regime == strategy::Regime::online_mini) {
            log.mini_experience_sizes.push_back(static_cast<int>(c1 - c0));
          }
          for (std::size_t b0 = c0; b0 < c1; b0 += static_cast<std::size_t>(B)) {
            step_no = log.steps;
            const std::size_t b1 = std::min(c1, b0 + static_cast<std::size_t>(B));
            std::vector<const Patch*> rows;
            for (std::size_t i = b0; i < b1; ++i) {
              rows.push_back(train_rows[order[i]]);
              ++visits[order[i]];
            }
            log.examples_seen += rows.size();
            nn::Batch batch = strategy::make_batch(stream, rows);
            const int new_rows = batch.size();
            strat->extend_batch(batch, rows, strategy_rng);
            const auto terms = strat->loss_terms(batch, rows, params);
            auto step = nn::loss_and_backward(params, spec, batch, terms);
            strat->transform_gradient(step.grads, params, strategy_rng);
            if (step.grads.size() != params.size()) throw ShapeMismatch("gradient transform changed the length");
            nn::sgd_step(params, step.grads, opt, epoch);
            strat->after_step(batch, rows, new_rows, step, strategy_rng);
            loss_sum += step.loss;
            ++log.steps;
            if (hooks.after_step) hooks.after_step(seed, ki, log.steps - 1, params);
          }
        }
      }
      step_no = -1;
      log.max_visits = visits.empty() ? 0 : *std::max_element(visits.begin(), visits.end());
      log.mean_loss = log.steps ? loss_sum / log.steps : 0.0;
      strat->on_experience_end(ki, exp, params, end_rng);
      log.strategy = strat->diagnostics();
      if (hooks.after_experience) hooks.after_experience(seed, ki, *strat);

      const auto means = strat->class_means(params);
      for (int c : exp.classes_present) seen.insert(c);
      const std::vector<int> seen_list(seen.begin(), seen.end());
      for (std::size_t j = 0; j < T; ++j) {
        const auto c = evaluate(params, spec, stream, stream.experiences[j].test, strat->classifier_mode(), means,
                                cfg.train.eval_batch, seen_list);
        res.correct[k][j] = c.correct;
        res.acc_matrix[k][j] = c.accuracy();
      }
    } catch (Error& e) {
      e.add_context("seed " + std::to_string(seed) + ", experience " + std::to_string(k) +
                    (step_no >= 0 ? ", step " + std::to_string(step_no) : std::string()));
      throw;
    }
    log.seconds = std::chrono::duration<double>(clock::now() - t_exp).count();
    res.experiences.push_back(std::move(log));
  }

  res.metrics = compute_metrics(res.acc_matrix, res.chance);
  if (val_stream) {
    const auto means = strat->class_means(params);
    double sum = 0.0;
    for (const auto& e : val_stream->experiences) {
      sum += evaluate(params, spec, *val_stream, e.test, strat->classifier_mode(), means, cfg.train.eval_batch,
                      std::vector<int>(seen.begin(), seen.end()))
                 .accuracy();
    }
    res.val_acc = sum / static_cast<double>(val_stream->size());
  }
  if (cfg.output.checkpoint) {
    nn::Checkpoint ckpt;
    ckpt.spec = spec;
    ckpt.params = params;
    ckpt.metadata["seed"] = seed;
    strat->save_state(ckpt);
    res.checkpoint = std::move(ckpt);
  }
  res.final_params = std::move(params);
  res.seconds = std::chrono::duration<double>(clock::now() - t_start).count();
  return res;
}

int worker_threads() {
  if (const char* env = std::getenv("HISTOCL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (failure) return;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

RunResult run_experiment(const RunConfig& cfg, const RunHooks& hooks, int threads) {
  cfg.validate();
  const PreparedData data = prepare_data(cfg);
  RunResult out;
  out.config = cfg;
  auto probe = strategy::make_strategy(cfg.strategy);
  out.classifier_mode = std::string(strategy::to_string(probe->classifier_mode()));
  out.regime = std::string(strategy::to_string(cfg.effective_regime()));
  out.epochs = cfg.effective_epochs();
  out.stream_manifest = build_stream(cfg, data, cfg.train.seeds.front(), false).manifest();

  out.seeds.resize(cfg.train.seeds.size());
  parallel_for(cfg.train.seeds.size(), threads > 0 ? threads : worker_threads(),
               [&](std::size_t i) { out.seeds[i] = run_seed(cfg, data, cfg.train.seeds[i], hooks); });

  std::vector<double> acc, bwt, fwt, val;
  for (const auto& s : out.seeds) {
    acc.push_back(s.metrics.acc);
    bwt.push_back(s.metrics.bwt);
    fwt.push_back(s.metrics.fwt);
    if (s.val_acc) val.push_back(*s.val_acc);
  }
  out.aggregate["acc"] = aggregate(acc);
  out.aggregate["bwt"] = aggregate(bwt);
  out.aggregate["fwt"] = aggregate(fwt);
  if (val.size() == out.seeds.size()) out.aggregate["val_acc"] = aggregate(val);
  return out;
}

}  // namespace histocl::harness
