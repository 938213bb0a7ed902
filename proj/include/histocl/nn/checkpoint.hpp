#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "histocl/nn/model.hpp"

namespace histocl::nn {

inline constexpr char kCheckpointMagic[4] = {'C', 'L', 'D', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Container layout (all integers little-endian):
///   "CLDP" | u32 version | u32 header_len | header JSON | f32 params... | f32 arrays...
/// The header holds the ModelSpec, the layout table, the names and lengths of
/// extra arrays (written in name order after the parameters) and free-form
/// metadata.
struct Checkpoint {
  ModelSpec spec;
  ParamVector params;
  std::map<std::string, std::vector<float>> arrays;
  nlohmann::json metadata = nlohmann::json::object();

  bool operator==(const Checkpoint&) const = default;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError on bad magic, version or truncated data.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace histocl::nn
