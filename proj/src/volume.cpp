#include "voxscreen/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

namespace voxscreen {

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', '1'};
constexpr size_t kHeaderBytes = 16;

uint32_t read_u32_le(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

void write_u32_le(unsigned char* p, uint32_t v) {
  p[0] = static_cast<unsigned char>(v);
  p[1] = static_cast<unsigned char>(v >> 8);
  p[2] = static_cast<unsigned char>(v >> 16);
  p[3] = static_cast<unsigned char>(v >> 24);
}

}  // namespace

std::string to_string(const Dims3& dims) {
  return std::to_string(dims.d) + "x" + std::to_string(dims.h) + "x" + std::to_string(dims.w);
}

Volume::Volume(Dims3 dims, float fill, std::string id)
    : dims_(dims), data_(static_cast<size_t>(dims.voxels()), fill), id_(std::move(id)) {
  if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0) {
    throw std::invalid_argument("volume dims must be positive, got " + to_string(dims));
  }
}

Volume::Volume(Dims3 dims, std::vector<float> data, std::string id)
    : dims_(dims), data_(std::move(data)), id_(std::move(id)) {
  if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0) {
    throw std::invalid_argument("volume dims must be positive, got " + to_string(dims));
  }
  if (static_cast<int64_t>(data_.size()) != dims.voxels()) {
    throw std::invalid_argument("volume data length " + std::to_string(data_.size()) + " does not match dims " +
                                to_string(dims));
  }
}

bool Volume::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Volume::mean() const {
  double sum = 0.0;
  for (float v : data_) sum += v;
  return data_.empty() ? 0.0 : sum / static_cast<double>(data_.size());
}

std::vector<unsigned char> encode_volume(const Volume& volume) {
  const Dims3& dims = volume.dims();
  constexpr int64_t kMax = std::numeric_limits<uint32_t>::max();
  if (dims.d > kMax || dims.h > kMax || dims.w > kMax) {
    throw VolumeFormatError(VolumeFormatError::Kind::dims_overflow, "volume dims do not fit u32: " + to_string(dims));
  }
  std::vector<unsigned char> out(kHeaderBytes + volume.data().size() * 4);
  std::memcpy(out.data(), kMagic, 4);
  write_u32_le(out.data() + 4, static_cast<uint32_t>(dims.d));
  write_u32_le(out.data() + 8, static_cast<uint32_t>(dims.h));
  write_u32_le(out.data() + 12, static_cast<uint32_t>(dims.w));
  unsigned char* p = out.data() + kHeaderBytes;
  for (float v : volume.data()) {
    write_u32_le(p, std::bit_cast<uint32_t>(v));
    p += 4;
  }
  return out;
}

Volume decode_volume(std::span<const unsigned char> bytes, std::string id) {
  using Kind = VolumeFormatError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw VolumeFormatError(Kind::bad_magic, "not a VOL1 file (bad magic)");
  }
  if (bytes.size() < kHeaderBytes) {
    throw VolumeFormatError(Kind::truncated, "VOL1 header truncated");
  }
  const uint64_t d = read_u32_le(bytes.data() + 4);
  const uint64_t h = read_u32_le(bytes.data() + 8);
  const uint64_t w = read_u32_le(bytes.data() + 12);
  uint64_t voxels = 0;
  uint64_t payload = 0;
  if (__builtin_mul_overflow(d, h, &voxels) || __builtin_mul_overflow(voxels, w, &voxels) ||
      __builtin_mul_overflow(voxels, uint64_t{4}, &payload) ||
      voxels > static_cast<uint64_t>(std::numeric_limits<int64_t>::max())) {
    throw VolumeFormatError(Kind::dims_overflow, "VOL1 dims product overflows: " + std::to_string(d) + "x" +
                                                     std::to_string(h) + "x" + std::to_string(w));
  }
  if (voxels == 0) {
    throw VolumeFormatError(Kind::dims_overflow, "VOL1 dims must be positive");
  }
  const uint64_t available = bytes.size() - kHeaderBytes;
  if (available < payload) {
    throw VolumeFormatError(Kind::truncated, "VOL1 payload truncated: expected " + std::to_string(voxels) +
                                                 " floats, found " + std::to_string(available / 4));
  }
  if (available > payload) {
    throw VolumeFormatError(Kind::trailing_bytes, "VOL1 payload has " + std::to_string(available - payload) +
                                                      " trailing bytes");
  }
  std::vector<float> data(voxels);
  const unsigned char* p = bytes.data() + kHeaderBytes;
  for (uint64_t i = 0; i < voxels; ++i, p += 4) {
    data[i] = std::bit_cast<float>(read_u32_le(p));
    if (!std::isfinite(data[i])) {
      throw VolumeFormatError(Kind::non_finite, "VOL1 payload holds a non-finite value at index " + std::to_string(i));
    }
  }
  return Volume(Dims3{int64_t(d), int64_t(h), int64_t(w)}, std::move(data), std::move(id));
}

Volume load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw VolumeFormatError(VolumeFormatError::Kind::io, "cannot open volume file " + path.string());
  }
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_volume(bytes, path.stem().string());
  } catch (const VolumeFormatError& e) {
    throw VolumeFormatError(e.kind(), path.string() + ": " + e.what());
  }
}

void save_volume(const Volume& volume, const std::filesystem::path& path) {
  const auto bytes = encode_volume(volume);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw VolumeFormatError(VolumeFormatError::Kind::io, "cannot open " + path.string() + " for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw VolumeFormatError(VolumeFormatError::Kind::io, "write failed for " + path.string());
  }
}

}  // namespace voxscreen
