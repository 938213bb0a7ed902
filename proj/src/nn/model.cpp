#include "histocl/nn/model.hpp"

#include <cmath>

#include "histocl/error.hpp"
#include "histocl/rng.hpp"

namespace histocl::nn {

ModelSpec ModelSpec::desk_default(int input_side, std::vector<HeadSpec> heads, std::uint64_t seed) {
  ModelSpec s;
  s.input_side = input_side;
  s.conv_blocks = {{16, 3, true}, {32, 3, true}, {64, 3, false}};
  s.feature_dim = 64;
  s.heads = std::move(heads);
  s.init_seed = seed;
  return s;
}

void ModelSpec::validate() const {
  if (input_side < 1) throw ShapeMismatch("input_side must be positive");
  if (conv_blocks.empty()) throw ShapeMismatch("model needs at least one conv block");
  int side = input_side;
  for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
    const auto& b = conv_blocks[i];
    if (b.out_channels < 1) throw ShapeMismatch("conv block " + std::to_string(i) + " has no channels");
    if (b.kernel != 3) throw ShapeMismatch("only 3x3 kernels are supported");
    if (b.pool) {
      if (side % 2 != 0) throw ShapeMismatch("cannot pool odd side " + std::to_string(side) + " in block " + std::to_string(i));
      side /= 2;
    }
  }
  if (feature_dim != conv_blocks.back().out_channels) {
    throw ShapeMismatch("feature_dim must equal the last block's channel count");
  }
  if (heads.empty()) throw ShapeMismatch("model needs at least one head");
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].n_outputs < 1) throw ShapeMismatch("head " + std::to_string(heads[i].head_id) + " has no outputs");
    for (std::size_t j = 0; j < i; ++j) {
      if (heads[j].head_id == heads[i].head_id) throw ShapeMismatch("duplicate head id " + std::to_string(heads[i].head_id));
    }
  }
}

std::size_t ModelSpec::head_index(int head_id) const {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].head_id == head_id) return i;
  }
  throw ShapeMismatch("no head with id " + std::to_string(head_id));
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : s.conv_blocks) blocks.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"pool", b.pool}});
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : s.heads) heads.push_back({{"head_id", h.head_id}, {"n_outputs", h.n_outputs}});
  j = {{"input_side", s.input_side},
       {"conv_blocks", blocks},
       {"feature_dim", s.feature_dim},
       {"heads", heads},
       {"init_seed", s.init_seed}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.input_side = j.at("input_side").get<int>();
  s.conv_blocks.clear();
  for (const auto& b : j.at("conv_blocks")) {
    s.conv_blocks.push_back({b.at("out_channels").get<int>(), b.value("kernel", 3), b.value("pool", false)});
  }
  s.feature_dim = j.at("feature_dim").get<int>();
  s.heads.clear();
  for (const auto& h : j.at("heads")) s.heads.push_back({h.at("head_id").get<int>(), h.at("n_outputs").get<int>()});
  s.init_seed = j.value("init_seed", std::uint64_t{0});
}

std::size_t LayerDesc::size() const {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

const LayerDesc& ParamVector::layer(const std::string& name) const {
  for (const auto& l : layout) {
    if (l.name == name) return l;
  }
  throw ShapeMismatch("no parameter layer named " + name);
}

std::vector<LayerDesc> make_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<LayerDesc> layout;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    LayerDesc d{std::move(name), offset, std::move(shape)};
    offset += d.size();
    layout.push_back(std::move(d));
  };
  int in = 3;
  for (std::size_t i = 0; i < spec.conv_blocks.size(); ++i) {
    const auto& b = spec.conv_blocks[i];
    add("conv" + std::to_string(i) + ".weight", {b.out_channels, in, b.kernel, b.kernel});
    add("conv" + std::to_string(i) + ".bias", {b.out_channels});
    in = b.out_channels;
  }
  for (const auto& h : spec.heads) {
    add("head" + std::to_string(h.head_id) + ".weight", {h.n_outputs, spec.feature_dim});
    add("head" + std::to_string(h.head_id) + ".bias", {h.n_outputs});
  }
  return layout;
}

ParamVector init_model(const ModelSpec& spec) {
  ParamVector p;
  p.layout = make_layout(spec);
  const auto& last = p.layout.back();
  p.values.assign(last.offset + last.size(), 0.0f);
  Rng rng(mix_seed(spec.init_seed));
  for (const auto& l : p.layout) {
    if (l.shape.size() == 1) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t k = 1; k < l.shape.size(); ++k) fan_in *= static_cast<std::size_t>(l.shape[k]);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < l.size(); ++i) p.values[l.offset + i] = static_cast<float>(normal(rng, 0.0, stddev));
  }
  return p;
}

}  // namespace histocl::nn
