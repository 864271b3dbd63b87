#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxscreen {

/// Voxel extents in (z, y, x) order, i.e. (D, H, W).
struct Dims3 {
  int64_t d = 0;
  int64_t h = 0;
  int64_t w = 0;

  int64_t voxels() const { return d * h * w; }
  int64_t operator[](int axis) const { return axis == 0 ? d : axis == 1 ? h : w; }
  int64_t& operator[](int axis) { return axis == 0 ? d : axis == 1 ? h : w; }
  bool operator==(const Dims3&) const = default;
};

std::string to_string(const Dims3& dims);

/// Dense attenuation grid. Storage is (z, y, x) with x fastest.
class Volume {
 public:
  Volume() = default;
  Volume(Dims3 dims, float fill = 0.0f, std::string id = {});
  Volume(Dims3 dims, std::vector<float> data, std::string id = {});

  const Dims3& dims() const { return dims_; }
  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }

  int64_t index(int64_t z, int64_t y, int64_t x) const { return (z * dims_.h + y) * dims_.w + x; }
  float& at(int64_t z, int64_t y, int64_t x) { return data_[index(z, y, x)]; }
  float at(int64_t z, int64_t y, int64_t x) const { return data_[index(z, y, x)]; }

  bool all_finite() const;
  double mean() const;

 private:
  Dims3 dims_;
  std::vector<float> data_;
  std::string id_;
};

/// Raised by the VOL1 reader and writer. `kind` separates the failure classes.
class VolumeFormatError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, dims_overflow, trailing_bytes, non_finite };

  VolumeFormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// VOL1 layout: "VOL1", u32 D, u32 H, u32 W (little endian), then D*H*W f32 LE.
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& volume, const std::filesystem::path& path);

Volume decode_volume(std::span<const unsigned char> bytes, std::string id = {});
std::vector<unsigned char> encode_volume(const Volume& volume);

}  // namespace voxscreen
