#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "histocl/nn/checkpoint.hpp"
#include "histocl/nn/network.hpp"
#include "histocl/patch.hpp"
#include "histocl/rng.hpp"
#include "histocl/scenario.hpp"

namespace histocl::strategy {

enum class ClassifierMode { head, nearest_mean_of_exemplars, prototypes };
std::string_view to_string(ClassifierMode mode);

/// offline: the configured epoch schedule. online: one pass per experience.
/// online_mini: one pass, consumed as fixed-size mini-experiences.
enum class Regime { offline, online, online_mini };
std::string_view to_string(Regime regime);
/// Throws ConfigError.
Regime parse_regime(std::string_view name);

inline constexpr int kMiniExperienceSize = 128;

/// Read-only run state shared with every hook.
struct StrategyContext {
  const scenario::ExperienceStream* stream = nullptr;
  const nn::ModelSpec* spec = nullptr;
  std::uint64_t seed = 0;
  int eval_batch = 64;
};

/// Builds a batch routed through the stream's heads.
nn::Batch make_batch(const scenario::ExperienceStream& stream, std::span<const Patch* const> rows);

/// Backbone features (rows x d) of a patch list, computed in chunks.
std::vector<float> compute_features(const nn::ParamVector& params, const nn::ModelSpec& spec,
                                    const scenario::ExperienceStream& stream, std::span<const Patch* const> rows,
                                    int chunk = 64);

std::vector<const Patch*> pointers(const Dataset& ds);

// ---------------------------------------------------------------------------
// building blocks

struct FisherDiag {
  std::vector<float> values;
  int sample_count = 0;
};

/// Diagonal true Fisher: per sampled example, draw y from the model's own
/// softmax and accumulate the squared gradient of log p(y|x). Examples are
/// drawn without replacement while n_samples <= |data|.
FisherDiag compute_fisher(const nn::ParamVector& params, const nn::ModelSpec& spec, const Dataset& data,
                          const std::function<int(const Patch&)>& head_of, int n_samples, std::uint64_t seed);

/// Greedy herding over L2-normalized rows of `features` (n x d). Returns
/// min(m, n) distinct indices in selection order; ties go to the lowest index.
std::vector<int> herding_select(std::span<const float> features, int n, int d, int m);

/// g if g.g_ref >= 0, else the projection of g orthogonal to g_ref.
/// Throws ZeroReference on the projection branch when |g_ref| <= 1e-12.
template <typename Real>
std::vector<Real> agem_project(std::span<const Real> g, std::span<const Real> g_ref);

/// normalize(alpha*p + (1-alpha)*z_mean). Throws DegeneratePrototype.
std::vector<float> cope_update_prototype(std::span<const float> p, std::span<const float> z_mean, double alpha);

/// Exemplars grouped by (class id, experience) in herding order.
class ExemplarMemory {
 public:
  struct Key {
    int class_id = 0;
    int experience = 0;
    auto operator<=>(const Key&) const = default;
  };

  explicit ExemplarMemory(int budget = 0) : budget_(budget) {}

  int budget() const { return budget_; }
  std::size_t total() const;
  std::size_t group_count() const { return groups_.size(); }
  const std::map<Key, std::vector<Patch>>& groups() const { return groups_; }
  std::vector<const Patch*> all() const;

  /// Per-group quota once `extra` new groups join the existing ones.
  int quota(std::size_t extra) const;
  /// Keeps the first m of every list.
  void truncate(int m);
  /// Throws PlanMismatch on a duplicate key or source key.
  void add_group(Key key, std::vector<Patch> exemplars);
  void clear() { groups_.clear(); }

 private:
  int budget_;
  std::map<Key, std::vector<Patch>> groups_;
};

/// Bounded replay store. Reservoir mode samples uniformly over the whole
/// insertion history. Balanced mode keeps per-class counts level: once full,
/// an insertion evicts from the largest class, or, when the new item's class
/// is itself the largest, replaces within that class by reservoir sampling.
class EpisodicBuffer {
 public:
  enum class Mode { reservoir, balanced };

  EpisodicBuffer(int capacity = 0, Mode mode = Mode::reservoir) : capacity_(capacity), mode_(mode) {}

  int capacity() const { return capacity_; }
  Mode mode() const { return mode_; }
  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }
  const std::vector<Patch>& slots() const { return slots_; }
  /// Stored count per class id.
  std::map<int, int> class_counts() const;
  /// Insertions offered per class id.
  const std::map<int, std::int64_t>& class_seen() const { return seen_class_; }

  void insert(const Patch& p, Rng& rng);
  /// Up to n distinct slots, uniformly at random.
  std::vector<const Patch*> sample(int n, Rng& rng) const;
  void clear();
  /// Reinstates a saved state; slots beyond capacity are rejected.
  void restore(std::vector<Patch> slots, std::int64_t seen, std::map<int, std::int64_t> seen_class);
  std::int64_t seen() const { return seen_; }

 private:
  int capacity_;
  Mode mode_;
  std::vector<Patch> slots_;
  std::int64_t seen_ = 0;
  std::map<int, std::int64_t> seen_class_;
};

class PrototypeStore {
 public:
  PrototypeStore(double alpha = 0.9, double tau = 0.1) : alpha_(alpha), tau_(tau) {}

  double alpha() const { return alpha_; }
  double tau() const { return tau_; }
  bool contains(int class_id) const { return protos_.count(class_id) > 0; }
  const std::map<int, std::vector<float>>& prototypes() const { return protos_; }

  /// Stores normalize(v). Throws DegeneratePrototype for a zero vector.
  void set(int class_id, std::span<const float> v);
  /// Momentum update toward a batch mean.
  void update(int class_id, std::span<const float> z_mean);
  void clear() { protos_.clear(); }

 private:
  double alpha_;
  double tau_;
  std::map<int, std::vector<float>> protos_;
};

// ---------------------------------------------------------------------------
// strategy hooks

/// Hooks invoked by the training loop, in this order per experience:
/// on_experience_start, training_set, then per step extend_batch,
/// loss_terms, transform_gradient, after_step; finally on_experience_end.
class Strategy {
 public:
  virtual ~Strategy() = default;

  virtual std::string name() const = 0;
  virtual ClassifierMode classifier_mode() const { return ClassifierMode::head; }
  /// Regime imposed by the method regardless of the configuration.
  virtual std::optional<Regime> forced_regime() const { return std::nullopt; }

  void bind(const StrategyContext& ctx) { ctx_ = ctx; }
  const StrategyContext& context() const { return ctx_; }

  virtual void on_experience_start(int k, const scenario::Experience& exp, const nn::ParamVector& params);
  /// Patches trained on during experience k.
  virtual std::vector<const Patch*> training_set(int k, const scenario::Experience& exp);
  /// Appends replay rows to a batch; returns the number of rows appended.
  virtual int extend_batch(nn::Batch& batch, std::vector<const Patch*>& rows, Rng& rng);
  virtual std::vector<nn::LossTerm> loss_terms(const nn::Batch& batch, std::span<const Patch* const> rows,
                                               const nn::ParamVector& params);
  /// Must keep the gradient length.
  virtual void transform_gradient(std::vector<float>& grads, const nn::ParamVector& params, Rng& rng);
  /// Called after the optimizer step with the pre-step features.
  virtual void after_step(const nn::Batch& batch, std::span<const Patch* const> rows, int new_rows,
                          const nn::StepResult<float>& step, Rng& rng);
  virtual void on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng& rng);

  /// Class means for the nearest-mean classifiers; empty means fall back
  /// to the heads.
  virtual std::vector<nn::ClassMean> class_means(const nn::ParamVector& params) const;
  /// Memory occupancy and similar counters, logged after each experience.
  virtual nlohmann::json diagnostics() const { return nlohmann::json::object(); }

  /// Memories and anchors as checkpoint arrays plus metadata.
  virtual void save_state(nn::Checkpoint& ckpt) const;
  /// `resolve` maps a source key to its patch. Throws CheckpointError.
  virtual void load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve);

 protected:
  nn::CrossEntropyTerm cross_entropy(const nn::Batch& batch) const;
  const scenario::ExperienceStream& stream() const { return *ctx_.stream; }
  const nn::ModelSpec& spec() const { return *ctx_.spec; }

  StrategyContext ctx_;
};

class Finetune : public Strategy {
 public:
  std::string name() const override { return "finetune"; }
};

/// Trains on the union of all experiences seen so far.
class Joint : public Strategy {
 public:
  std::string name() const override { return "joint"; }
  std::vector<const Patch*> training_set(int k, const scenario::Experience& exp) override;
};

class Ewc : public Strategy {
 public:
  Ewc(double lambda, int fisher_samples) : lambda_(lambda), fisher_samples_(fisher_samples) {}
  std::string name() const override { return "ewc"; }
  std::vector<nn::LossTerm> loss_terms(const nn::Batch& batch, std::span<const Patch* const> rows,
                                       const nn::ParamVector& params) override;
  void on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng& rng) override;
  void save_state(nn::Checkpoint& ckpt) const override;
  void load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) override;

  struct Anchor {
    std::shared_ptr<const std::vector<float>> theta;
    std::shared_ptr<const std::vector<float>> fisher;
  };
  const std::vector<Anchor>& anchors() const { return anchors_; }

 private:
  double lambda_;
  int fisher_samples_;
  std::vector<Anchor> anchors_;
};

/// Single anchor; running Fisher F <- gamma*F + F_new.
class OnlineEwc : public Strategy {
 public:
  OnlineEwc(double lambda, double gamma, int fisher_samples)
      : lambda_(lambda), gamma_(gamma), fisher_samples_(fisher_samples) {}
  std::string name() const override { return "online_ewc"; }
  std::vector<nn::LossTerm> loss_terms(const nn::Batch& batch, std::span<const Patch* const> rows,
                                       const nn::ParamVector& params) override;
  void on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng& rng) override;
  void save_state(nn::Checkpoint& ckpt) const override;
  void load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) override;

  const std::vector<float>* fisher() const { return fisher_.get(); }
  const std::vector<float>* anchor() const { return theta_.get(); }

 private:
  double lambda_;
  double gamma_;
  int fisher_samples_;
  std::shared_ptr<const std::vector<float>> theta_;
  std::shared_ptr<const std::vector<float>> fisher_;
};

/// Frozen copy of the model and the (head, output) pairs it was trained on.
class Teacher {
 public:
  bool active() const { return params_.has_value() && !outputs_.empty(); }
  void freeze(const nn::ParamVector& params) { params_ = params; }
  void record_outputs(const scenario::ExperienceStream& stream, const std::set<int>& classes);
  /// One distillation term per head with recorded outputs.
  std::vector<nn::LossTerm> terms(const nn::ModelSpec& spec, const nn::Batch& batch, double weight,
                                  double temperature) const;
  const std::map<int, std::set<int>>& outputs() const { return outputs_; }
  nlohmann::json outputs_json() const;
  void restore_outputs(const nlohmann::json& j);

 private:
  std::optional<nn::ParamVector> params_;
  std::map<int, std::set<int>> outputs_;
};

class Lwf : public Strategy {
 public:
  Lwf(double lambda_o, double temperature) : lambda_o_(lambda_o), temperature_(temperature) {}
  std::string name() const override { return "lwf"; }
  void on_experience_start(int k, const scenario::Experience& exp, const nn::ParamVector& params) override;
  std::vector<nn::LossTerm> loss_terms(const nn::Batch& batch, std::span<const Patch* const> rows,
                                       const nn::ParamVector& params) override;
  void on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng& rng) override;
  void save_state(nn::Checkpoint& ckpt) const override;
  void load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) override;

 private:
  double lambda_o_;
  double temperature_;
  Teacher teacher_;
};

class Icarl : public Strategy {
 public:
  Icarl(int budget, double lambda_o, double temperature)
      : memory_(budget), lambda_o_(lambda_o), temperature_(temperature) {}
  std::string name() const override { return "icarl"; }
  ClassifierMode classifier_mode() const override { return ClassifierMode::nearest_mean_of_exemplars; }
  void on_experience_start(int k, const scenario::Experience& exp, const nn::ParamVector& params) override;
  std::vector<const Patch*> training_set(int k, const scenario::Experience& exp) override;
  std::vector<nn::LossTerm> loss_terms(const nn::Batch& batch, std::span<const Patch* const> rows,
                                       const nn::ParamVector& params) override;
  void on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng& rng) override;
  std::vector<nn::ClassMean> class_means(const nn::ParamVector& params) const override;
  void save_state(nn::Checkpoint& ckpt) const override;
  void load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) override;

  nlohmann::json diagnostics() const override;
  const ExemplarMemory& memory() const { return memory_; }

 private:
  ExemplarMemory memory_;
  double lambda_o_;
  double temperature_;
  Teacher teacher_;
};

class Agem : public Strategy {
 public:
  Agem(int capacity, int ref_batch) : buffer_(capacity, EpisodicBuffer::Mode::reservoir), ref_batch_(ref_batch) {}
  std::string name() const override { return "agem"; }
  std::optional<Regime> forced_regime() const override { return Regime::online; }
  void transform_gradient(std::vector<float>& grads, const nn::ParamVector& params, Rng& rng) override;
  void on_experience_end(int k, const scenario::Experience& exp, const nn::ParamVector& params, Rng& rng) override;
  void save_state(nn::Checkpoint& ckpt) const override;
  void load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) override;

  nlohmann::json diagnostics() const override;
  const EpisodicBuffer& buffer() const { return buffer_; }
  std::int64_t projections() const { return projections_; }

 private:
  EpisodicBuffer buffer_;
  int ref_batch_;
  std::int64_t projections_ = 0;
};

class Cope : public Strategy {
 public:
  Cope(int capacity, double alpha, double tau)
      : buffer_(capacity, EpisodicBuffer::Mode::balanced), store_(alpha, tau) {}
  std::string name() const override { return "cope"; }
  ClassifierMode classifier_mode() const override { return ClassifierMode::prototypes; }
  std::optional<Regime> forced_regime() const override { return Regime::online_mini; }
  int extend_batch(nn::Batch& batch, std::vector<const Patch*>& rows, Rng& rng) override;
  std::vector<nn::LossTerm> loss_terms(const nn::Batch& batch, std::span<const Patch* const> rows,
                                       const nn::ParamVector& params) override;
  void after_step(const nn::Batch& batch, std::span<const Patch* const> rows, int new_rows,
                  const nn::StepResult<float>& step, Rng& rng) override;
  std::vector<nn::ClassMean> class_means(const nn::ParamVector& params) const override;
  void save_state(nn::Checkpoint& ckpt) const override;
  void load_state(const nn::Checkpoint& ckpt, const std::function<const Patch*(const std::string&)>& resolve) override;

  nlohmann::json diagnostics() const override;
  const EpisodicBuffer& buffer() const { return buffer_; }
  const PrototypeStore& store() const { return store_; }
  /// Smallest and largest prototype norm after any update so far.
  std::pair<double, double> norm_range() const { return {min_norm_, max_norm_}; }

 private:
  void track_norms();

  EpisodicBuffer buffer_;
  PrototypeStore store_;
  std::vector<int> proto_ids_;  // class id per prototype row of the current step
  double min_norm_ = 1.0;
  double max_norm_ = 1.0;
};

/// Hyperparameters by config key. Missing keys take the defaults.
struct StrategyParams {
  std::string name = "finetune";
  double lambda = 100.0;
  double gamma = 0.9;
  double lambda_o = 1.0;
  double temperature = 2.0;
  int memory = 300;
  /// Replay capacity; -1 selects the method default (A-GEM 500, CoPE 300).
  int capacity = -1;
  int ref_batch = 64;
  double alpha = 0.9;
  double tau = 0.1;
  int fisher_samples = 200;

  /// Parses a `strategy` config section; rejects keys the named strategy
  /// does not use. Throws ConfigError.
  static StrategyParams from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Throws ConfigError for unknown names or invalid values.
std::unique_ptr<Strategy> make_strategy(const StrategyParams& p);

std::vector<std::string> strategy_names();

}  // namespace histocl::strategy
