#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "histocl/error.hpp"
#include "histocl/stain.hpp"

using namespace histocl;
using namespace histocl::stain;

namespace {

Vec3 combo(double a, const Vec3& x, double b, const Vec3& y) {
  return {a * x[0] + b * y[0], a * x[1] + b * y[1], a * x[2] + b * y[2]};
}

double vnorm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Dataset labelled(int classes, int per_class, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  for (int c = 0; c < classes; ++c) {
    ds.class_names.push_back("c" + std::to_string(c));
    for (int i = 0; i < per_class; ++i) {
      Patch p = testing::stain_patch(rng, 8);
      p.class_id = c;
      p.source_key = "c" + std::to_string(c) + "_" + std::to_string(i);
      ds.patches.push_back(std::move(p));
    }
  }
  return ds;
}

}  // namespace

TEST_SUITE("stain") {
  TEST_CASE("rgb_to_od reference values") {
    CHECK(rgb_to_od({255, 255, 255}) == Vec3{0, 0, 0});
    const Vec3 grey = rgb_to_od({26, 26, 26});
    for (double v : grey) CHECK(v == doctest::Approx(0.9915668324631373).epsilon(1e-12));
    const Vec3 od = rgb_to_od({0, 10, 255});
    CHECK(od[0] == doctest::Approx(2.406540180433955).epsilon(1e-12));
    CHECK(od[1] == doctest::Approx(1.4065401804339552).epsilon(1e-12));
    CHECK(od[2] == 0.0);
  }

  TEST_CASE("od_to_rgb reference values and roundtrip") {
    CHECK(od_to_rgb({0, 0, 0}) == Rgb{255, 255, 255});
    CHECK(od_to_rgb({3.0, 0, 0}) == Rgb{0, 255, 255});
    CHECK(od_to_rgb({-1.0, 0, 0}) == Rgb{255, 255, 255});
    for (int v = 1; v <= 255; ++v) {
      const auto u = static_cast<std::uint8_t>(v);
      CHECK(od_to_rgb(rgb_to_od({u, u, u})) == Rgb{u, u, u});
    }
  }

  TEST_CASE("solve recovers known stain combinations") {
    const auto& m = StainMatrix::default_he();
    const Vec3 c = m.solve(combo(0.7, m.row(0), 0.0, m.row(1)));
    CHECK(c[0] == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(std::abs(c[1]) < 1e-12);
    CHECK(std::abs(c[2]) < 1e-12);
    const Vec3 c2 = m.solve(combo(0.5, m.row(0), 0.3, m.row(1)));
    CHECK(std::abs(c2[0] - 0.5) < 1e-5);
    CHECK(std::abs(c2[1] - 0.3) < 1e-5);
    CHECK(std::abs(c2[2]) < 1e-5);
  }

  TEST_CASE("default matrix rows are unit and residual is orthogonal") {
    const auto& m = StainMatrix::default_he();
    for (int s = 0; s < 3; ++s) CHECK(vnorm(m.row(s)) == doctest::Approx(1.0).epsilon(1e-12));
    const double d0 = m.row(2)[0] * m.row(0)[0] + m.row(2)[1] * m.row(0)[1] + m.row(2)[2] * m.row(0)[2];
    CHECK(std::abs(d0) < 1e-12);
  }

  TEST_CASE("singular matrix is rejected") {
    CHECK_THROWS_AS(StainMatrix::from_rows({1, 0, 0}, {0, 1, 0}, {1, 1, 0}), SingularMatrix);
    CHECK_THROWS_AS(StainMatrix::from_stains({1, 0, 0}, {2, 0, 0}), DegenerateStain);
  }

  TEST_CASE("white patch unmixes to zero") {
    Patch p(8, 8);
    std::fill(p.pixels.begin(), p.pixels.end(), 255);
    const auto c = unmix(p, StainMatrix::default_he());
    for (const auto& plane : c.planes) {
      for (double v : plane) CHECK(v == 0.0);
    }
  }

  TEST_CASE("remix with identity scales roundtrips within 2 levels") {
    Rng rng(11);
    const auto& m = StainMatrix::default_he();
    for (int n = 0; n < 50; ++n) {
      const Patch p = testing::stain_patch(rng, 8);
      const Patch q = remix(unmix(p, m), m, {1, 1, 1});
      for (std::size_t i = 0; i < p.pixels.size(); ++i) {
        REQUIRE(std::abs(int(p.pixels[i]) - int(q.pixels[i])) <= 2);
      }
    }
  }

  TEST_CASE("remix scales hematoxylin linearly") {
    const auto& m = StainMatrix::default_he();
    ConcentrationMap c;
    c.width = c.height = 1;
    c.planes = {std::vector<double>{0.5}, std::vector<double>{0.3}, std::vector<double>{0.0}};
    const Patch out = remix(c, m, {2, 1, 1});
    const Rgb expected = od_to_rgb(combo(1.0, m.row(0), 0.3, m.row(1)));
    CHECK(out.at(0, 0) == expected);
  }

  TEST_CASE("linearity at OD level") {
    const auto& m = StainMatrix::default_he();
    Rng rng(3);
    for (int n = 0; n < 200; ++n) {
      const Vec3 c{uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 0.2)};
      const Vec3 s{uniform(rng, 0.5, 2), uniform(rng, 0.5, 2), 1.0};
      Vec3 od{0, 0, 0};
      for (int k = 0; k < 3; ++k) {
        for (int ch = 0; ch < 3; ++ch) od[ch] += s[k] * c[k] * m.row(k)[ch];
      }
      const Vec3 back = m.solve(od);
      for (int k = 0; k < 3; ++k) CHECK(std::abs(back[k] - s[k] * c[k]) < 1e-4);
    }
  }

  TEST_CASE("more stain never brightens a pixel") {
    Rng rng(5);
    const auto& m = StainMatrix::default_he();
    const Patch p = testing::stain_patch(rng, 8);
    const auto c = unmix(p, m);
    const Patch a = remix(c, m, {1.0, 1.0, 1.0});
    const Patch b = remix(c, m, {1.5, 1.0, 1.0});
    const Patch e = remix(c, m, {1.0, 2.0, 1.0});
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
      CHECK(b.pixels[i] <= a.pixels[i]);
      CHECK(e.pixels[i] <= a.pixels[i]);
    }
  }

  TEST_CASE("perturb_stain_vector identity, norm and reference values") {
    const auto& m = StainMatrix::default_he();
    for (int s = 0; s < 2; ++s) {
      const Vec3 same = perturb_stain_vector(m.row(s), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) CHECK(std::abs(same[c] - m.row(s)[c]) < 1e-4);
    }
    const Vec3 e = perturb_stain_vector(m.row(1), 0.04, 1.0);
    CHECK(e[0] == doctest::Approx(0.07086098).epsilon(1e-6));
    CHECK(e[1] == doctest::Approx(0.97433845).epsilon(1e-6));
    CHECK(e[2] == doctest::Approx(0.21364294).epsilon(1e-6));
    const Vec3 h = perturb_stain_vector(m.row(0), -0.05, 0.8);
    CHECK(h[0] == doctest::Approx(0.71182706).epsilon(1e-6));
    CHECK(h[1] == doctest::Approx(0.60913039).epsilon(1e-6));
    CHECK(h[2] == doctest::Approx(0.34966041).epsilon(1e-6));
    Rng rng(9);
    for (int n = 0; n < 200; ++n) {
      const Vec3 v = perturb_stain_vector(m.row(n % 2), uniform(rng, -0.1, 0.1), uniform(rng, 0.5, 1.5));
      CHECK(std::abs(vnorm(v) - 1.0) < 1e-6);
    }
  }

  TEST_CASE("HSV conversion roundtrips") {
    Rng rng(4);
    for (int n = 0; n < 500; ++n) {
      const Vec3 rgb{uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)};
      const Vec3 back = hsv_to_rgb(rgb_to_hsv(rgb));
      for (int c = 0; c < 3; ++c) CHECK(std::abs(back[c] - rgb[c]) < 1e-12);
    }
  }

  TEST_CASE("default domain specs") {
    const auto d = default_domain_specs();
    for (int i = 0; i < 5; ++i) {
      CHECK(d[i].domain_id == i + 1);
      CHECK_NOTHROW(d[i].validate());
    }
    CHECK(d[0].is_identity());
    CHECK(d[1].eosin_intensity == Interval{1.75, 2.75});
    CHECK(d[1].hema_intensity == Interval{1.5, 2.0});
    CHECK(d[2].eosin_intensity == Interval{0.4, 2.75});
    CHECK(d[3].eosin_hue_delta == Interval{-0.05, -0.03});

    DomainSpec bad = d[1];
    bad.eosin_intensity = {2.0, 1.0};
    CHECK_THROWS_AS(bad.validate(), InvalidDomainSpec);
    bad = d[1];
    bad.hema_sat = {0.0, 1.0};
    CHECK_THROWS_AS(bad.validate(), InvalidDomainSpec);
    bad = d[1];
    bad.domain_id = 1;
    CHECK_THROWS_AS(bad.validate(), InvalidDomainSpec);
  }

  TEST_CASE("sample_domain stays inside the intervals") {
    const auto d = default_domain_specs();
    Rng rng(1);
    for (int n = 0; n < 1000; ++n) {
      const auto s = sample_domain(d[1], rng);
      CHECK(s.eosin_intensity >= 1.75);
      CHECK(s.eosin_intensity <= 2.75);
      CHECK(s.hema_intensity >= 1.5);
      CHECK(s.hema_intensity <= 2.0);
      CHECK(s.eosin_hue_delta == 0.0);
    }
  }

  TEST_CASE("augment: domain 1 identity, determinism, darker domain 2") {
    const auto d = default_domain_specs();
    Rng rng(8);
    Patch p = testing::stain_patch(rng, 8);
    p.class_id = 2;
    p.source_key = "k";
    CHECK(augment(p, d[0], 1) == p);
    for (int k = 1; k < 5; ++k) CHECK(augment(p, d[k], 77) == augment(p, d[k], 77));
    const Patch dark = augment(p, d[1], 77);
    CHECK(dark.class_id == 2);
    CHECK(dark.source_key == "k");
    long sum_a = 0, sum_b = 0;
    for (std::size_t i = 0; i < p.pixels.size(); ++i) {
      sum_a += p.pixels[i];
      sum_b += dark.pixels[i];
    }
    CHECK(sum_b < sum_a);
  }

  TEST_CASE("build_augmented_dataset partitions every class") {
    const Dataset ds = labelled(3, 12, 2);
    const auto specs = default_domain_specs();
    const Dataset aug = build_augmented_dataset(ds, specs, 99);
    REQUIRE(aug.size() == ds.size());
    const auto dom = domain_assignment(ds, 99);
    std::vector<std::array<int, 5>> counts(3, std::array<int, 5>{});
    for (std::size_t i = 0; i < ds.size(); ++i) {
      REQUIRE(aug.patches[i].domain_id.has_value());
      CHECK(*aug.patches[i].domain_id == dom[i]);
      CHECK(aug.patches[i].source_key == ds.patches[i].source_key);
      CHECK(aug.patches[i].class_id == ds.patches[i].class_id);
      ++counts[static_cast<std::size_t>(ds.patches[i].class_id)][static_cast<std::size_t>(dom[i] - 1)];
      if (dom[i] == 1) CHECK(aug.patches[i].pixels == ds.patches[i].pixels);
    }
    for (const auto& row : counts) {
      const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
      CHECK(*hi - *lo <= 1);
    }
    CHECK(build_augmented_dataset(ds, specs, 99) == aug);
  }

  TEST_CASE("five items per class give one per domain") {
    const Dataset ds = labelled(2, 5, 3);
    const auto dom = domain_assignment(ds, 4);
    for (int c = 0; c < 2; ++c) {
      std::set<int> seen;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.patches[i].class_id == c) seen.insert(dom[i]);
      }
      CHECK(seen == std::set<int>{1, 2, 3, 4, 5});
    }
    CHECK_THROWS_AS(build_augmented_dataset(labelled(2, 4, 3), default_domain_specs(), 1), EmptyClass);
  }
}
