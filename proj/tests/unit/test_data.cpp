#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "histocl/data.hpp"
#include "histocl/error.hpp"

using namespace histocl;

namespace {

Dataset counted(const std::vector<int>& per_class) {
  Dataset ds;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    ds.class_names.push_back("c" + std::to_string(c));
    for (int i = 0; i < per_class[c]; ++i) {
      Patch p(8, 8);
      p.class_id = static_cast<int>(c);
      p.source_key = "c" + std::to_string(c) + "_" + std::to_string(i);
      p.pixels[0] = static_cast<std::uint8_t>(i);
      ds.patches.push_back(std::move(p));
    }
  }
  return ds;
}

std::multiset<std::string> keys(const Dataset& ds) {
  std::multiset<std::string> out;
  for (const auto& p : ds.patches) out.insert(p.source_key);
  return out;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("split fractions (1,0,0) keep everything in train") {
    const Dataset ds = counted({7, 3});
    const auto s = data::split(ds, {1.0, 0.0, 0.0, 4, true});
    CHECK(s.train == ds);
    CHECK(s.val.empty());
    CHECK(s.test.empty());
  }

  TEST_CASE("split 100 per class at 0.8/0.1/0.1 gives 80/10/10") {
    const Dataset ds = counted({100, 100, 100});
    const auto s = data::split(ds, {0.8, 0.1, 0.1, 1, true});
    for (const Dataset* part : {&s.train, &s.val, &s.test}) {
      std::vector<int> n(3, 0);
      for (const auto& p : part->patches) ++n[static_cast<std::size_t>(p.class_id)];
      const int want = part == &s.train ? 80 : 10;
      for (int v : n) CHECK(v == want);
    }
  }

  TEST_CASE("split counts stay within one of fraction times count") {
    const double fr[3] = {0.7, 0.1, 0.2};
    for (int count = 1; count <= 50; ++count) {
      const Dataset ds = counted({count});
      const auto s = data::split(ds, {fr[0], fr[1], fr[2], static_cast<std::uint64_t>(count), true});
      const std::size_t sizes[3] = {s.train.size(), s.val.size(), s.test.size()};
      for (int k = 0; k < 3; ++k) CHECK(std::abs(double(sizes[k]) - fr[k] * count) <= 1.0);
    }
  }

  TEST_CASE("split is a deterministic partition with either stratification") {
    const Dataset ds = counted({13, 29, 4});
    for (bool strat : {true, false}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const data::SplitSpec spec{0.5, 0.25, 0.25, seed, strat};
        const auto s = data::split(ds, spec);
        auto all = keys(s.train);
        for (const auto& k : keys(s.val)) all.insert(k);
        for (const auto& k : keys(s.test)) all.insert(k);
        CHECK(all == keys(ds));
        CHECK(std::set<std::string>(all.begin(), all.end()).size() == ds.size());
        const auto again = data::split(ds, spec);
        CHECK(again.train == s.train);
        CHECK(again.test == s.test);
      }
    }
  }

  TEST_CASE("split rejects invalid fractions") {
    const Dataset ds = counted({4});
    CHECK_THROWS_AS(data::split(ds, {0.5, 0.1, 0.1, 0, true}), ConfigError);
    CHECK_THROWS_AS(data::split(ds, {1.2, -0.2, 0.0, 0, true}), ConfigError);
  }

  TEST_CASE("downscale identity, constants and checkerboard") {
    Patch p(16, 16);
    p.class_id = 3;
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        const std::uint8_t v = (x + y) % 2 ? 255 : 0;
        p.set(x, y, {v, v, v});
      }
    }
    CHECK(data::downscale(p, 16) == p);
    const Patch half = data::downscale(p, 8);
    CHECK(half.class_id == 3);
    for (auto v : half.pixels) CHECK((v == 127 || v == 128));

    Patch flat(20, 20);
    for (int y = 0; y < 20; ++y) {
      for (int x = 0; x < 20; ++x) flat.set(x, y, {12, 200, 77});
    }
    const Patch small = data::downscale(flat, 8);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) CHECK(small.at(x, y) == Rgb{12, 200, 77});
    }
  }

  TEST_CASE("synth_generate is deterministic and class-regenerable") {
    const Dataset a = data::synth_generate(4, 12, 16, 5);
    const Dataset b = data::synth_generate(4, 12, 16, 5);
    CHECK(a == b);
    CHECK(a.size() == 48);
    CHECK(a.num_classes() == 4);
    const auto cls = data::synth_generate_class(2, 12, 16, 5);
    std::vector<Patch> from_full;
    for (const auto& p : a.patches) {
      if (p.class_id == 2) from_full.push_back(p);
    }
    CHECK(cls == from_full);
    CHECK(data::synth_generate(4, 12, 16, 6) != a);
    for (const auto& p : a.patches) {
      CHECK(std::any_of(p.pixels.begin(), p.pixels.end(), [](std::uint8_t v) { return v < 255; }));
    }
  }

  TEST_CASE("synthetic classes separate by mean colour") {
    const Dataset ds = data::synth_generate(6, 200, 32, 1);
    const int k = ds.num_classes();
    std::vector<std::array<double, 3>> feat(ds.size());
    std::vector<std::array<double, 3>> mean(static_cast<std::size_t>(k), {0, 0, 0});
    std::vector<int> n(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& p = ds.patches[i];
      feat[i] = {0, 0, 0};
      for (std::size_t j = 0; j < p.pixels.size(); ++j) feat[i][j % 3] += p.pixels[j];
      for (auto& v : feat[i]) v /= static_cast<double>(p.pixel_count());
      for (int c = 0; c < 3; ++c) mean[static_cast<std::size_t>(p.class_id)][c] += feat[i][c];
      ++n[static_cast<std::size_t>(p.class_id)];
    }
    for (int c = 0; c < k; ++c) {
      for (auto& v : mean[static_cast<std::size_t>(c)]) v /= n[static_cast<std::size_t>(c)];
    }
    int hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      int best = 0;
      double bd = 1e300;
      for (int c = 0; c < k; ++c) {
        double d = 0;
        for (int ch = 0; ch < 3; ++ch) d += std::pow(feat[i][ch] - mean[static_cast<std::size_t>(c)][ch], 2);
        if (d < bd) bd = d, best = c;
      }
      hits += best == ds.patches[i].class_id;
    }
    CHECK(double(hits) / double(ds.size()) >= 0.9);
  }

  TEST_CASE("PNG roundtrip and folder IO") {
    const auto dir = testing::temp_dir("data_io");
    const Dataset ds = data::synth_generate(3, 10, 16, 2);
    const auto m = data::write_folder(ds, dir);
    CHECK(m == data::manifest(ds));
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    const Dataset back = data::load_folder(dir);
    REQUIRE(back.size() == ds.size());
    CHECK(back.class_names == ds.class_names);
    CHECK(data::manifest(back)["checksum"] == m["checksum"]);
    CHECK(data::load_folder(dir) == back);

    const Dataset renamed = data::load_folder(dir, std::vector<std::string>{ds.class_names[2], ds.class_names[0],
                                                                            ds.class_names[1]});
    CHECK(renamed.class_names[0] == ds.class_names[2]);
    CHECK_THROWS_AS(data::load_folder(dir, std::vector<std::string>{"absent"}), MissingClass);

    const auto empty = testing::temp_dir("data_empty");
    CHECK_THROWS_AS(data::load_folder(empty), MissingClass);

    const auto bad = testing::temp_dir("data_bad");
    std::filesystem::create_directories(bad / "x");
    std::ofstream(bad / "x" / "broken.png") << "not a png";
    try {
      data::load_folder(bad);
      FAIL("expected DecodeError");
    } catch (const DecodeError& e) {
      CHECK(std::string(e.what()).find("broken.png") != std::string::npos);
    }
  }

  TEST_CASE("augmented folder layout carries domain ids") {
    const auto dir = testing::temp_dir("data_aug");
    Dataset ds = data::synth_generate(2, 10, 16, 2);
    for (std::size_t i = 0; i < ds.size(); ++i) ds.patches[i].domain_id = static_cast<int>(i % 5) + 1;
    data::write_folder(ds, dir, true);
    CHECK(std::filesystem::is_directory(dir / "domain_3"));
    const Dataset back = data::load_augmented_folder(dir);
    CHECK(back.size() == ds.size());
    std::map<int, int> per_domain;
    for (const auto& p : back.patches) {
      REQUIRE(p.domain_id.has_value());
      ++per_domain[*p.domain_id];
    }
    CHECK(per_domain.size() == 5);
  }
}
