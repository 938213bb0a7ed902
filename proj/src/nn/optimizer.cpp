#include "histocl/nn/optimizer.hpp"

#include <cmath>
#include <string>

#include "histocl/error.hpp"

namespace histocl::nn {

double OptimizerState::effective_lr(int epoch) const {
  double rate = lr;
  for (const auto& s : schedule) {
    if (s.epoch <= epoch) rate *= s.multiplier;
  }
  return rate;
}

void sgd_step(ParamVector& params, std::span<const float> grads, OptimizerState& state, int epoch) {
  const std::size_t n = params.values.size();
  if (grads.size() != n) {
    throw ShapeMismatch("gradient length " + std::to_string(grads.size()) + " differs from parameter count " +
                        std::to_string(n));
  }
  if (!(state.lr > 0.0)) throw ShapeMismatch("learning rate must be positive");
  const bool fresh = state.velocity.empty();
  if (!fresh && state.velocity.size() != n) throw ShapeMismatch("optimizer velocity length differs from parameter count");

  const auto rate = static_cast<float>(state.effective_lr(epoch));
  const auto mom = static_cast<float>(state.momentum);
  const auto wd = static_cast<float>(state.weight_decay);
  std::vector<float> v(n), theta(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = (fresh ? 0.0f : mom * state.velocity[i]) + grads[i] + wd * params.values[i];
    theta[i] = params.values[i] - rate * v[i];
    if (!std::isfinite(v[i]) || !std::isfinite(theta[i])) {
      throw NonFiniteUpdate("non-finite update at parameter " + std::to_string(i));
    }
  }
  state.velocity = std::move(v);
  params.values = std::move(theta);
}

}  // namespace histocl::nn
