#include "voxscreen/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace voxscreen {

namespace {

constexpr char kMagic[4] = {'V', 'C', 'K', '1'};

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const uint32_t u = std::bit_cast<uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32(const unsigned char* p) {
  uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= uint32_t(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<nn::Parameter<float>>& tensors) {
  nlohmann::json dir = nlohmann::json::array();
  std::string payload;
  uint64_t offset = 0;
  for (const auto& t : tensors) {
    dir.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    for (float v : t.tensor.values()) put_f32(payload, v);
    offset += static_cast<uint64_t>(t.tensor.numel());
  }
  const std::string header = nlohmann::json{{"meta", meta}, {"tensors", dir}}.dump();
  std::string bytes(kMagic, 4);
  put_u64(bytes, header.size());
  bytes += header;
  bytes += payload;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(p, kMagic, 4) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  const uint64_t header_len = get_u64(p + 4);
  if (header_len > bytes.size() - 12) throw CheckpointError(path.string() + ": truncated header");
  Checkpoint ckpt;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  }
  ckpt.meta = header.value("meta", nlohmann::json::object());
  const size_t payload_start = 12 + header_len;
  const uint64_t payload_floats = (bytes.size() - payload_start) / 4;
  for (const auto& entry : header.at("tensors")) {
    StoredTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<nn::Shape>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const uint64_t n = static_cast<uint64_t>(nn::shape_numel(t.shape));
    if (offset + n > payload_floats) throw CheckpointError(path.string() + ": truncated payload at " + t.name);
    t.values.resize(n);
    for (uint64_t i = 0; i < n; ++i) t.values[i] = get_f32(p + payload_start + 4 * (offset + i));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void restore_tensors(const Checkpoint& ckpt, std::vector<nn::Parameter<float>>& tensors) {
  std::map<std::string, const StoredTensor*> stored;
  for (const auto& t : ckpt.tensors) stored[t.name] = &t;
  for (auto& t : tensors) {
    auto it = stored.find(t.name);
    if (it == stored.end()) throw CheckpointError("checkpoint lacks tensor " + t.name + " (architecture mismatch)");
    if (it->second->shape != t.tensor.shape()) {
      throw CheckpointError("checkpoint tensor " + t.name + " has shape " + nn::shape_string(it->second->shape) +
                            ", model expects " + nn::shape_string(t.tensor.shape()));
    }
    std::copy(it->second->values.begin(), it->second->values.end(), t.tensor.data());
    stored.erase(it);
  }
  if (!stored.empty()) {
    throw CheckpointError("checkpoint has unexpected tensor " + stored.begin()->first + " (architecture mismatch)");
  }
}

}  // namespace voxscreen
