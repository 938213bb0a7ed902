#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace histocl::nn {

struct ConvBlockSpec {
  int out_channels = 16;
  int kernel = 3;
  bool pool = false;
  bool operator==(const ConvBlockSpec&) const = default;
};

struct HeadSpec {
  int head_id = 0;
  int n_outputs = 1;
  bool operator==(const HeadSpec&) const = default;
};

/// Convolutional feature extractor followed by one or more linear heads.
/// Features are the globally average-pooled output of the last block.
struct ModelSpec {
  int input_side = 32;
  std::vector<ConvBlockSpec> conv_blocks;
  int feature_dim = 0;
  std::vector<HeadSpec> heads;
  std::uint64_t init_seed = 0;

  /// Three blocks of 16/32/64 channels, pooling after the first two.
  static ModelSpec desk_default(int input_side, std::vector<HeadSpec> heads, std::uint64_t seed);

  /// Throws ShapeMismatch.
  void validate() const;
  /// Position of head_id in `heads`; throws ShapeMismatch when absent.
  std::size_t head_index(int head_id) const;
  const HeadSpec& head(int head_id) const { return heads[head_index(head_id)]; }

  bool operator==(const ModelSpec&) const = default;
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

struct LayerDesc {
  std::string name;
  std::size_t offset = 0;
  std::vector<int> shape;

  std::size_t size() const;
  bool operator==(const LayerDesc&) const = default;
};

/// Flat trainable parameters. Conv weights are [out, in, k, k], head weights
/// [n_outputs, feature_dim]; each followed by its bias.
struct ParamVector {
  std::vector<float> values;
  std::vector<LayerDesc> layout;

  std::size_t size() const { return values.size(); }
  const LayerDesc& layer(const std::string& name) const;
  bool operator==(const ParamVector&) const = default;
};

std::vector<LayerDesc> make_layout(const ModelSpec& spec);

/// He-normal weights, zero biases, deterministic per spec.init_seed.
ParamVector init_model(const ModelSpec& spec);

}  // namespace histocl::nn
