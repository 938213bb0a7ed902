#pragma once

#include <filesystem>
#include <string>

#include "histocl/harness.hpp"
#include "histocl/rng.hpp"

namespace histocl::testing {

/// Desk-scale suite: synthetic 6 classes x 200, 32 px, split 0.7/0.1/0.2,
/// pairs of classes per experience, seeds 0..2, lr 0.01.
harness::RunConfig desk_config(const std::string& strategy, scenario::ScenarioKind kind = scenario::ScenarioKind::class_il);

/// A small, fast variant for unit tests: 4 classes x 40, 16 px, 2 epochs, one seed.
harness::RunConfig small_config(const std::string& strategy, scenario::ScenarioKind kind = scenario::ScenarioKind::class_il);

/// A random patch whose pixels are renderings of non-negative H, E and
/// residual concentrations through the default matrix, channels in [10,245].
Patch stain_patch(Rng& rng, int side);

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& name);

std::string read_file(const std::filesystem::path& file);

}  // namespace histocl::testing
