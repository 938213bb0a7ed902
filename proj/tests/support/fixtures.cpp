#include "fixtures.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "histocl/stain.hpp"

namespace histocl::testing {

harness::RunConfig desk_config(const std::string& strategy, scenario::ScenarioKind kind) {
  harness::RunConfig cfg;
  cfg.data.source = "synth";
  cfg.data.synth = {6, 200, 32, 1};
  cfg.data.split = {0.7, 0.1, 0.2, 0, true};
  cfg.scenario.kind = kind;
  cfg.scenario.grouping = "222";
  cfg.strategy.name = strategy;
  cfg.train.lr = 0.01;
  cfg.train.seeds = {0, 1, 2};
  cfg.validate();
  return cfg;
}

harness::RunConfig small_config(const std::string& strategy, scenario::ScenarioKind kind) {
  harness::RunConfig cfg;
  cfg.data.source = "synth";
  cfg.data.synth = {4, 40, 16, 3};
  cfg.data.split = {0.6, 0.2, 0.2, 0, true};
  cfg.scenario.kind = kind;
  cfg.scenario.grouping = "22";
  cfg.model.blocks = {{8, 3, true}, {16, 3, false}};
  cfg.strategy.name = strategy;
  cfg.train.epochs = 2;
  cfg.train.lr = 0.01;
  cfg.train.seeds = {5};
  cfg.validate();
  return cfg;
}

Patch stain_patch(Rng& rng, int side) {
  const auto& m = stain::StainMatrix::default_he();
  Patch p(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      for (;;) {
        const stain::Vec3 c{uniform(rng, 0.0, 1.2), uniform(rng, 0.0, 1.2), uniform(rng, 0.0, 0.3)};
        stain::Vec3 od{0, 0, 0};
        for (int s = 0; s < 3; ++s) {
          for (int ch = 0; ch < 3; ++ch) od[ch] += c[s] * m.row(s)[ch];
        }
        const Rgb px = stain::od_to_rgb(od);
        if (std::all_of(px.begin(), px.end(), [](std::uint8_t v) { return v >= 10 && v <= 245; })) {
          p.set(x, y, px);
          break;
        }
      }
    }
  }
  return p;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("histocl_test_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace histocl::testing
