#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "histocl/patch.hpp"
#include "histocl/rng.hpp"

namespace histocl::stain {

using Vec3 = std::array<double, 3>;

inline constexpr double kWhiteLevel = 255.0;

/// Rows are unit optical-density vectors: hematoxylin, eosin, residual.
class StainMatrix {
 public:
  /// Normalizes the stain rows; residual is the normalized cross product of
  /// the first two.
  static StainMatrix from_stains(const Vec3& hematoxylin, const Vec3& eosin);
  /// Takes three rows verbatim (after normalization) and validates them.
  static StainMatrix from_rows(const Vec3& h, const Vec3& e, const Vec3& residual);
  static const StainMatrix& default_he();

  const Vec3& row(int s) const { return rows_[static_cast<std::size_t>(s)]; }
  const std::array<Vec3, 3>& rows() const { return rows_; }
  double determinant() const;

  /// Solves od = c^T M for c. Throws SingularMatrix.
  Vec3 solve(const Vec3& od) const;

 private:
  std::array<Vec3, 3> rows_{};
  std::array<Vec3, 3> inverse_{};
  void prepare();
};

/// Per-pixel stain concentrations (c_H, c_E, c_res), planar layout.
struct ConcentrationMap {
  int width = 0;
  int height = 0;
  std::array<std::vector<double>, 3> planes;

  double at(int s, int x, int y) const {
    return planes[static_cast<std::size_t>(s)][static_cast<std::size_t>(y) * width + x];
  }
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

/// Sampling ranges that define one simulated staining domain.
struct DomainSpec {
  int domain_id = 1;
  Interval eosin_intensity{1.0, 1.0};
  Interval hema_intensity{1.0, 1.0};
  Interval eosin_hue_delta{0.0, 0.0};
  Interval hema_hue_delta{0.0, 0.0};
  Interval eosin_sat{1.0, 1.0};
  Interval hema_sat{1.0, 1.0};

  bool is_identity() const;
  /// Throws InvalidDomainSpec.
  void validate() const;
  bool operator==(const DomainSpec&) const = default;
};

/// Domains 1..5: unchanged, stronger stain, eosin intensity change, hue
/// shift, hue and saturation shift.
std::array<DomainSpec, 5> default_domain_specs();

Vec3 rgb_to_od(const Rgb& pixel, double white_level = kWhiteLevel);
Rgb od_to_rgb(const Vec3& od, double white_level = kWhiteLevel);

ConcentrationMap unmix(const Patch& patch, const StainMatrix& m);
/// Renders concentrations back to RGB. Labels of the returned patch are
/// default; callers copy them from the source.
Patch remix(const ConcentrationMap& c, const StainMatrix& m, const Vec3& scales);

/// Recolors a stain vector through its rendered appearance in HSV space.
/// Throws DegenerateStain.
Vec3 perturb_stain_vector(const Vec3& row, double hue_delta, double sat_scale);

/// The factors drawn for one patch.
struct DomainSample {
  double eosin_intensity = 1.0;
  double hema_intensity = 1.0;
  double eosin_hue_delta = 0.0;
  double hema_hue_delta = 0.0;
  double eosin_sat = 1.0;
  double hema_sat = 1.0;
};

DomainSample sample_domain(const DomainSpec& spec, Rng& rng);

Patch augment(const Patch& patch, const DomainSpec& spec, std::uint64_t seed);
Patch augment(const Patch& patch, const DomainSpec& spec, Rng& rng);

/// Splits each class into five near-equal seeded partitions and applies
/// spec k to partition k. Output keeps the input order. Throws EmptyClass.
Dataset build_augmented_dataset(const Dataset& ds, const std::array<DomainSpec, 5>& specs,
                                std::uint64_t seed);

/// Assignment of every patch index to a domain (1..5) as used by
/// build_augmented_dataset; exposed for partition checks.
std::vector<int> domain_assignment(const Dataset& ds, std::uint64_t seed);

// HSV helpers, all channels in [0,1], hue in [0,1).
Vec3 rgb_to_hsv(const Vec3& rgb);
Vec3 hsv_to_rgb(const Vec3& hsv);

}  // namespace histocl::stain
