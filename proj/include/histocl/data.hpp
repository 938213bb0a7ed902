#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "histocl/patch.hpp"

namespace histocl::data {

struct SplitSpec {
  double train = 1.0;
  double val = 0.0;
  double test = 0.0;
  std::uint64_t seed = 0;
  bool stratified = true;

  /// Throws ConfigError when fractions are outside [0,1] or do not sum to 1.
  void validate() const;
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Reads `root/<class_name>/<image>.png`. Class ids follow lexicographic
/// folder order, or `expected_classes` order when given.
Dataset load_folder(const std::filesystem::path& root,
                    const std::optional<std::vector<std::string>>& expected_classes = std::nullopt);

/// Reads an augmented tree `root/domain_<k>/<class>/<image>.png`, tagging
/// each patch with its domain id.
Dataset load_augmented_folder(const std::filesystem::path& root);

/// Writes `root/<class>/<key>.png`; with_domains puts each patch under
/// `root/domain_<k>/`. Returns the manifest that was also written to
/// `root/manifest.json`.
nlohmann::json write_folder(const Dataset& ds, const std::filesystem::path& root, bool with_domains = false);

/// Class names, per-class counts and pixel checksums.
nlohmann::json manifest(const Dataset& ds);

/// FNV-1a over the pixel bytes.
std::uint64_t checksum(const Patch& p);

Splits split(const Dataset& ds, const SplitSpec& spec);

/// Bilinear resample to side x side (pixel-centre aligned).
Patch downscale(const Patch& p, int side);

/// Procedural H&E-like patches rendered through the default stain matrix.
Dataset synth_generate(int n_classes, int per_class, int side, std::uint64_t seed);

/// Patches of one class exactly as synth_generate would produce them.
std::vector<Patch> synth_generate_class(int class_id, int per_class, int side, std::uint64_t seed);

/// Mean (c_H, c_E) signature of a synthetic class.
std::pair<double, double> synth_class_signature(int class_id);

// PNG codec (8-bit RGB)
Patch read_png(const std::filesystem::path& file);
void write_png(const Patch& p, const std::filesystem::path& file);

}  // namespace histocl::data
