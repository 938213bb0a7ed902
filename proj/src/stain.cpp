#include "histocl/stain.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "histocl/error.hpp"

namespace histocl::stain {

namespace {

constexpr double kDeterminantFloor = 1e-6;

double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Vec3 normalized(const Vec3& v) {
  const double n = norm(v);
  if (n < 1e-12) throw DegenerateStain("stain vector has zero length");
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

void check_interval(const Interval& iv, const char* name, bool strictly_positive, int id) {
  if (!(iv.lo <= iv.hi) || !std::isfinite(iv.lo) || !std::isfinite(iv.hi)) {
    throw InvalidDomainSpec("domain " + std::to_string(id) + ": " + name + " lower bound exceeds upper bound");
  }
  if (strictly_positive && iv.lo <= 0.0) {
    throw InvalidDomainSpec("domain " + std::to_string(id) + ": " + name + " must be strictly positive");
  }
}

}  // namespace

StainMatrix StainMatrix::from_stains(const Vec3& hematoxylin, const Vec3& eosin) {
  const Vec3 h = normalized(hematoxylin);
  const Vec3 e = normalized(eosin);
  return from_rows(h, e, normalized(cross(h, e)));
}

StainMatrix StainMatrix::from_rows(const Vec3& h, const Vec3& e, const Vec3& residual) {
  StainMatrix m;
  m.rows_ = {normalized(h), normalized(e), normalized(residual)};
  m.prepare();
  return m;
}

const StainMatrix& StainMatrix::default_he() {
  static const StainMatrix m = from_stains({0.650, 0.704, 0.286}, {0.072, 0.990, 0.105});
  return m;
}

double StainMatrix::determinant() const {
  const auto& r = rows_;
  return r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
         r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
         r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
}

void StainMatrix::prepare() {
  const double det = determinant();
  if (std::abs(det) <= kDeterminantFloor) {
    throw SingularMatrix("stain matrix determinant " + std::to_string(det) + " is below threshold");
  }
  const auto& r = rows_;
  // adjugate / det
  inverse_[0] = {(r[1][1] * r[2][2] - r[1][2] * r[2][1]) / det, (r[0][2] * r[2][1] - r[0][1] * r[2][2]) / det,
                 (r[0][1] * r[1][2] - r[0][2] * r[1][1]) / det};
  inverse_[1] = {(r[1][2] * r[2][0] - r[1][0] * r[2][2]) / det, (r[0][0] * r[2][2] - r[0][2] * r[2][0]) / det,
                 (r[0][2] * r[1][0] - r[0][0] * r[1][2]) / det};
  inverse_[2] = {(r[1][0] * r[2][1] - r[1][1] * r[2][0]) / det, (r[0][1] * r[2][0] - r[0][0] * r[2][1]) / det,
                 (r[0][0] * r[1][1] - r[0][1] * r[1][0]) / det};
}

Vec3 StainMatrix::solve(const Vec3& od) const {
  // od is a row vector: c = od * M^-1
  Vec3 c{};
  for (int s = 0; s < 3; ++s) {
    c[s] = od[0] * inverse_[0][s] + od[1] * inverse_[1][s] + od[2] * inverse_[2][s];
  }
  return c;
}

bool DomainSpec::is_identity() const {
  return eosin_intensity == Interval{1.0, 1.0} && hema_intensity == Interval{1.0, 1.0} &&
         eosin_hue_delta == Interval{0.0, 0.0} && hema_hue_delta == Interval{0.0, 0.0} &&
         eosin_sat == Interval{1.0, 1.0} && hema_sat == Interval{1.0, 1.0};
}

void DomainSpec::validate() const {
  if (domain_id < 1 || domain_id > 5) {
    throw InvalidDomainSpec("domain id " + std::to_string(domain_id) + " outside 1..5");
  }
  check_interval(eosin_intensity, "eosin_intensity", true, domain_id);
  check_interval(hema_intensity, "hema_intensity", true, domain_id);
  check_interval(eosin_hue_delta, "eosin_hue_delta", false, domain_id);
  check_interval(hema_hue_delta, "hema_hue_delta", false, domain_id);
  check_interval(eosin_sat, "eosin_sat", true, domain_id);
  check_interval(hema_sat, "hema_sat", true, domain_id);
  if (domain_id == 1 && !is_identity()) {
    throw InvalidDomainSpec("domain 1 must be the identity transform");
  }
}

std::array<DomainSpec, 5> default_domain_specs() {
  std::array<DomainSpec, 5> d{};
  for (int i = 0; i < 5; ++i) d[i].domain_id = i + 1;
  d[1].eosin_intensity = {1.75, 2.75};
  d[1].hema_intensity = {1.5, 2.0};
  // Labelled "decreased" but the published range also covers increases; kept as printed.
  d[2].eosin_intensity = {0.4, 2.75};
  d[3].eosin_hue_delta = {-0.05, -0.03};
  d[3].hema_hue_delta = {0.05, 0.08};
  d[4].eosin_hue_delta = {0.03, 0.05};
  d[4].eosin_sat = {1.2, 1.4};
  d[4].hema_sat = {1.1, 1.3};
  return d;
}

Vec3 rgb_to_od(const Rgb& pixel, double white_level) {
  Vec3 od{};
  for (int c = 0; c < 3; ++c) {
    const double v = std::max<double>(pixel[c], 1.0);
    od[c] = std::log10(white_level / v);
  }
  return od;
}

Rgb od_to_rgb(const Vec3& od, double white_level) {
  Rgb out{};
  for (int c = 0; c < 3; ++c) {
    const double d = std::isfinite(od[c]) ? std::max(od[c], 0.0) : 0.0;
    const double v = std::round(white_level * std::pow(10.0, -d));
    out[c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

ConcentrationMap unmix(const Patch& patch, const StainMatrix& m) {
  ConcentrationMap c;
  c.width = patch.width;
  c.height = patch.height;
  const std::size_t n = patch.pixel_count();
  for (auto& plane : c.planes) plane.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Rgb px{patch.pixels[3 * i], patch.pixels[3 * i + 1], patch.pixels[3 * i + 2]};
    const Vec3 conc = m.solve(rgb_to_od(px));
    for (int s = 0; s < 3; ++s) c.planes[s][i] = std::max(conc[s], 0.0);
  }
  return c;
}

Patch remix(const ConcentrationMap& c, const StainMatrix& m, const Vec3& scales) {
  Patch out(c.width, c.height);
  const std::size_t n = static_cast<std::size_t>(c.width) * c.height;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 od{0.0, 0.0, 0.0};
    for (int s = 0; s < 3; ++s) {
      const double w = scales[s] * c.planes[s][i];
      for (int ch = 0; ch < 3; ++ch) od[ch] += w * m.row(s)[ch];
    }
    const Rgb px = od_to_rgb(od);
    out.pixels[3 * i] = px[0];
    out.pixels[3 * i + 1] = px[1];
    out.pixels[3 * i + 2] = px[2];
  }
  return out;
}

Vec3 rgb_to_hsv(const Vec3& rgb) {
  const double r = rgb[0], g = rgb[1], b = rgb[2];
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double v = mx;
  if (mx == mn) return {0.0, 0.0, v};
  const double s = (mx - mn) / mx;
  const double rc = (mx - r) / (mx - mn);
  const double gc = (mx - g) / (mx - mn);
  const double bc = (mx - b) / (mx - mn);
  double h;
  if (r == mx) {
    h = bc - gc;
  } else if (g == mx) {
    h = 2.0 + rc - bc;
  } else {
    h = 4.0 + gc - rc;
  }
  h = h / 6.0;
  h -= std::floor(h);
  return {h, s, v};
}

Vec3 hsv_to_rgb(const Vec3& hsv) {
  const double h = hsv[0] - std::floor(hsv[0]);
  const double s = hsv[1], v = hsv[2];
  if (s == 0.0) return {v, v, v};
  const double scaled = h * 6.0;
  const int sector = static_cast<int>(scaled) % 6;
  const double f = scaled - std::floor(scaled);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Vec3 perturb_stain_vector(const Vec3& row, double hue_delta, double sat_scale) {
  Vec3 rgb{};
  for (int c = 0; c < 3; ++c) rgb[c] = std::pow(10.0, -row[c]);
  Vec3 hsv = rgb_to_hsv(rgb);
  hsv[0] += hue_delta;
  hsv[0] -= std::floor(hsv[0]);
  hsv[1] = std::clamp(hsv[1] * sat_scale, 0.0, 1.0);
  rgb = hsv_to_rgb(hsv);
  Vec3 od{};
  for (int c = 0; c < 3; ++c) {
    const double v = std::max(rgb[c] * kWhiteLevel, 1.0);
    od[c] = std::log10(kWhiteLevel / v);
  }
  const double n = norm(od);
  if (!(n >= 1e-6)) throw DegenerateStain("perturbed stain vector has norm below 1e-6");
  return {od[0] / n, od[1] / n, od[2] / n};
}

DomainSample sample_domain(const DomainSpec& spec, Rng& rng) {
  DomainSample s;
  // fixed draw order regardless of which intervals are degenerate
  s.eosin_intensity = uniform(rng, spec.eosin_intensity.lo, spec.eosin_intensity.hi);
  s.hema_intensity = uniform(rng, spec.hema_intensity.lo, spec.hema_intensity.hi);
  s.eosin_hue_delta = uniform(rng, spec.eosin_hue_delta.lo, spec.eosin_hue_delta.hi);
  s.hema_hue_delta = uniform(rng, spec.hema_hue_delta.lo, spec.hema_hue_delta.hi);
  s.eosin_sat = uniform(rng, spec.eosin_sat.lo, spec.eosin_sat.hi);
  s.hema_sat = uniform(rng, spec.hema_sat.lo, spec.hema_sat.hi);
  return s;
}

Patch augment(const Patch& patch, const DomainSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.domain_id == 1) return patch;
  const DomainSample f = sample_domain(spec, rng);
  const StainMatrix& base = StainMatrix::default_he();
  auto recolor = [](const Vec3& row, double hue, double sat) {
    return (hue == 0.0 && sat == 1.0) ? row : perturb_stain_vector(row, hue, sat);
  };
  const Vec3 h = recolor(base.row(0), f.hema_hue_delta, f.hema_sat);
  const Vec3 e = recolor(base.row(1), f.eosin_hue_delta, f.eosin_sat);
  const StainMatrix target = (h == base.row(0) && e == base.row(1)) ? base : StainMatrix::from_stains(h, e);
  Patch out = remix(unmix(patch, base), target, {f.hema_intensity, f.eosin_intensity, 1.0});
  out.class_id = patch.class_id;
  out.domain_id = patch.domain_id;
  out.task_id = patch.task_id;
  out.source_key = patch.source_key;
  return out;
}

Patch augment(const Patch& patch, const DomainSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return augment(patch, spec, rng);
}

std::vector<int> domain_assignment(const Dataset& ds, std::uint64_t seed) {
  std::vector<int> domain(ds.size(), 0);
  const auto by_class = ds.indices_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    if (idx.size() < 5) {
      throw EmptyClass("class '" + ds.class_names[c] + "' has " + std::to_string(idx.size()) +
                       " items; at least 5 are needed for five domains");
    }
    Rng rng = make_rng(seed, 0xD0A1u + c);
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) domain[idx[k]] = static_cast<int>(k % 5) + 1;
  }
  return domain;
}

Dataset build_augmented_dataset(const Dataset& ds, const std::array<DomainSpec, 5>& specs, std::uint64_t seed) {
  if (ds.empty()) throw EmptyClass("dataset is empty");
  for (int k = 0; k < 5; ++k) {
    specs[k].validate();
    if (specs[k].domain_id != k + 1) {
      throw InvalidDomainSpec("domain spec at position " + std::to_string(k) + " has id " +
                              std::to_string(specs[k].domain_id));
    }
  }
  const std::vector<int> domain = domain_assignment(ds, seed);
  Dataset out = ds.empty_like();
  out.patches.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int d = domain[i];
    Patch p = augment(ds.patches[i], specs[d - 1], derive_seed(seed, 0xA0000000ull + i));
    p.domain_id = d;
    out.patches.push_back(std::move(p));
  }
  out.metadata["augmented"] = "5-domain";
  return out;
}

}  // namespace histocl::stain
