#include "histocl/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "histocl/error.hpp"

namespace histocl::nn {

namespace {

static_assert(sizeof(float) == 4);

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, const std::vector<float>& values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> get_floats(const std::string& in, std::size_t& at, std::size_t count) {
  if (in.size() < at + count * 4) throw CheckpointError("checkpoint truncated");
  std::vector<float> v(count);
  for (std::size_t i = 0; i < count; ++i, at += 4) v[i] = std::bit_cast<float>(get_u32(in, at));
  return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& l : ckpt.params.layout) layout.push_back({{"name", l.name}, {"offset", l.offset}, {"shape", l.shape}});
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [name, values] : ckpt.arrays) arrays.push_back({{"name", name}, {"length", values.size()}});
  const nlohmann::json header = {{"model", ckpt.spec},
                                 {"layout", layout},
                                 {"param_count", ckpt.params.values.size()},
                                 {"arrays", arrays},
                                 {"metadata", ckpt.metadata}};
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  put_floats(out, ckpt.params.values);
  for (const auto& [name, values] : ckpt.arrays) put_floats(out, values);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(len)) throw CheckpointError("checkpoint header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.spec = header.at("model").get<ModelSpec>();
  for (const auto& l : header.at("layout")) {
    ckpt.params.layout.push_back({l.at("name").get<std::string>(), l.at("offset").get<std::size_t>(),
                                  l.at("shape").get<std::vector<int>>()});
  }
  if (ckpt.params.layout != make_layout(ckpt.spec)) throw CheckpointError("layout table does not match model spec");
  std::size_t at = 12 + static_cast<std::size_t>(len);
  ckpt.params.values = get_floats(bytes, at, header.at("param_count").get<std::size_t>());
  for (const auto& a : header.at("arrays")) {
    ckpt.arrays[a.at("name").get<std::string>()] = get_floats(bytes, at, a.at("length").get<std::size_t>());
  }
  if (at != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  ckpt.metadata = header.at("metadata");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  const std::string bytes = encode_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read " + file.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace histocl::nn
