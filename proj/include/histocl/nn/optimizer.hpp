#pragma once

#include <span>
#include <vector>

#include "histocl/nn/model.hpp"

namespace histocl::nn {

struct LrStep {
  int epoch = 0;
  double multiplier = 1.0;
  bool operator==(const LrStep&) const = default;
};

/// SGD with momentum and L2 weight decay folded into the velocity.
struct OptimizerState {
  std::vector<float> velocity;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::vector<LrStep> schedule{{10, 0.1}, {13, 0.1}};

  /// lr times every multiplier whose epoch threshold is <= epoch.
  double effective_lr(int epoch) const;
  void reset() { velocity.clear(); }
};

/// v <- momentum*v + g + weight_decay*theta; theta <- theta - lr_eff*v.
/// Throws NonFiniteUpdate (parameters and state untouched) or ShapeMismatch.
void sgd_step(ParamVector& params, std::span<const float> grads, OptimizerState& state, int epoch);

}  // namespace histocl::nn
