#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "histocl/nn/model.hpp"
#include "histocl/patch.hpp"

namespace histocl::nn {

/// A minibatch in channel-major per-sample layout (B x 3 x side x side) with
/// pixels scaled to [0,1]. Each row carries the head it is routed through and
/// its target output index within that head (-1 when unlabelled).
struct Batch {
  int side = 0;
  std::vector<float> images;
  std::vector<int> heads;
  std::vector<int> labels;

  int size() const { return static_cast<int>(heads.size()); }
  void add(const Patch& p, int head, int label);
};

template <typename Real>
struct BlockCache {
  int in_channels = 0;
  int out_channels = 0;
  int side = 0;
  bool pool = false;
  std::vector<Real> cols;                // (in*9) x (B*side*side)
  std::vector<Real> activation;          // out x (B*side*side), post-ReLU
  std::vector<std::uint32_t> pool_argmax;  // out x (B*(side/2)^2), index into the activation row
};

template <typename Real>
struct ForwardCache {
  int batch = 0;
  std::vector<BlockCache<Real>> blocks;
  std::vector<Real> output;  // last block output, channel-major
  int output_side = 0;
};

template <typename Real>
struct BatchOutputT {
  int batch = 0;
  int feature_dim = 0;
  std::vector<Real> features;              // B x d
  std::vector<std::vector<Real>> logits;   // per row, width of the row's head
  std::shared_ptr<const ForwardCache<Real>> cache;
};
using BatchOutput = BatchOutputT<float>;

// ---------------------------------------------------------------------------
// loss terms

struct CrossEntropyTerm {
  std::vector<int> labels;  // per row, output index within the row's head; -1 skips the row
  double weight = 1.0;
};

/// weight * T^2 * KL(softmax_T(teacher) || softmax_T(student)) averaged over
/// rows, restricted to `outputs` of head `head_id` (all outputs when empty).
struct DistillationTerm {
  int head_id = 0;
  std::vector<float> teacher_logits;  // B x n_outputs(head_id)
  std::vector<int> outputs;
  double temperature = 2.0;
  double weight = 1.0;
};

/// (lambda/2) * sum_j F_j (theta_j - anchor_j)^2. Independent of the batch.
struct EwcPenaltyTerm {
  std::shared_ptr<const std::vector<float>> anchor;
  std::shared_ptr<const std::vector<float>> fisher;
  double lambda = 0.0;
};

/// Prototype cross-entropy on L2-normalized features:
/// -log softmax_k(z . p_k / tau)[target]. Rows with target -1 are skipped.
struct PrototypeTerm {
  std::vector<float> prototypes;  // K x d, unit rows
  std::vector<int> targets;       // per row, index into prototypes
  double tau = 0.1;
  double weight = 1.0;
};

using LossTerm = std::variant<CrossEntropyTerm, DistillationTerm, EwcPenaltyTerm, PrototypeTerm>;

std::string_view loss_term_name(const LossTerm& term);
/// Throws UnknownTerm for names other than cross_entropy, distillation,
/// ewc_penalty, prototype_ppp.
std::size_t loss_term_index(std::string_view name);

template <typename Real>
struct StepResult {
  double loss = 0.0;
  std::vector<double> term_losses;
  std::vector<Real> grads;
  std::vector<Real> features;  // B x d from the forward pass
};

// ---------------------------------------------------------------------------
// templated core; instantiated for float (training) and double (checks)

template <typename Real>
BatchOutputT<Real> forward_t(std::span<const Real> params, const ModelSpec& spec, const Batch& batch);

/// Logits of one head for every row of a feature matrix (B x d).
template <typename Real>
std::vector<Real> head_logits_t(std::span<const Real> params, const ModelSpec& spec, std::span<const Real> features,
                                int head_id);

template <typename Real>
StepResult<Real> loss_and_backward_t(std::span<const Real> params, const ModelSpec& spec, const Batch& batch,
                                     std::span<const LossTerm> terms);

// ---------------------------------------------------------------------------
// float API

BatchOutput forward(const ParamVector& params, const ModelSpec& spec, const Batch& batch);
/// Routes every row through head_id.
BatchOutput forward(const ParamVector& params, const ModelSpec& spec, Batch batch, int head_id);

std::vector<float> head_logits(const ParamVector& params, const ModelSpec& spec, std::span<const float> features,
                               int head_id);

StepResult<float> loss_and_backward(const ParamVector& params, const ModelSpec& spec, const Batch& batch,
                                    std::span<const LossTerm> terms);

/// ReLU on/off pattern and pooling winners of a forward pass. Two parameter
/// settings with equal signatures lie in the same smooth piece of the network.
template <typename Real>
std::vector<std::uint32_t> activation_signature(const ForwardCache<Real>& cache);

// ---------------------------------------------------------------------------
// small numeric helpers

/// Temperature softmax with max subtraction.
std::vector<double> softmax_t(std::span<const double> logits, double temperature);

/// Binary-safe KL(p || q) of two probability vectors.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Entry in a class-mean table used by nearest_mean_classify.
struct ClassMean {
  int class_id = 0;
  std::vector<float> mean;
};

/// Argmin Euclidean distance; ties resolve to the lowest class id.
int nearest_mean_classify(std::span<const float> feature, std::span<const ClassMean> means);

/// In-place L2 normalization; zero vectors are left unchanged.
void l2_normalize(std::span<float> v);

}  // namespace histocl::nn
