#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "histocl/nn/model.hpp"
#include "histocl/nn/network.hpp"

namespace histocl::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +-eps probes cross a ReLU or pooling kink.
  std::size_t skipped = 0;
};

/// Backprop vs central finite differences in double precision. The relative
/// error of a coordinate is |a - n| / max(|a|, |n|, floor).
GradCheck check_gradients(const nn::ModelSpec& spec, std::span<const double> params, const nn::Batch& batch,
                          std::span<const nn::LossTerm> terms, double eps = 1e-3, double floor = 1e-4);

/// A model of a few hundred parameters: side 6, two conv blocks, two heads.
nn::ModelSpec toy_spec(std::uint64_t seed);

/// A batch of random patches routed through head 0 (3 outputs) and head 1 (2 outputs).
nn::Batch toy_batch(int rows, std::uint64_t seed);

/// One loss term of each kind for the toy model; `which` indexes the LossTerm variant.
nn::LossTerm toy_term(std::size_t which, const nn::ModelSpec& spec, std::span<const double> params,
                      const nn::Batch& batch, std::uint64_t seed);

std::vector<double> to_double(const std::vector<float>& v);

}  // namespace histocl::testing
