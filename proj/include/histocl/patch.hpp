#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace histocl {

using Rgb = std::array<std::uint8_t, 3>;

/// An RGB tile with its labels. Pixels are interleaved row-major HWC.
struct Patch {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
  int class_id = 0;
  std::optional<int> domain_id;
  std::optional<int> task_id;
  std::string source_key;

  Patch() = default;
  Patch(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  Rgb at(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  void set(int x, int y, Rgb c) {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    pixels[i] = c[0];
    pixels[i + 1] = c[1];
    pixels[i + 2] = c[2];
  }

  bool operator==(const Patch&) const = default;
};

struct Dataset {
  std::vector<Patch> patches;
  std::vector<std::string> class_names;
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return patches.size(); }
  bool empty() const { return patches.empty(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  /// Same class names and metadata, no patches.
  Dataset empty_like() const {
    Dataset d;
    d.class_names = class_names;
    d.metadata = metadata;
    return d;
  }

  /// Patch indices grouped by class id, each list in dataset order.
  std::vector<std::vector<std::size_t>> indices_by_class() const {
    std::vector<std::vector<std::size_t>> out(class_names.size());
    for (std::size_t i = 0; i < patches.size(); ++i) {
      out.at(static_cast<std::size_t>(patches[i].class_id)).push_back(i);
    }
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

}  // namespace histocl
