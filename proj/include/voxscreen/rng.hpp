#pragma once

#include <cstdint>
#include <string_view>

namespace voxscreen {

/// Counter-based generator: output i is a keyed hash of i, so a stream can be
/// split into independent named or indexed children without sharing state.
/// Every draw is computed with integer arithmetic plus a fixed float mapping,
/// which keeps generated data identical across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  uint64_t next_u64() { return mix(key_ + kGolden * ++counter_); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(static_cast<unsigned __int128>(next_u64()) * span >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  Rng split(uint64_t index) const { return Rng(key_, mix(index + 0x9e3779b97f4a7c15ULL)); }
  Rng split(std::string_view name) const;

  uint64_t key() const { return key_; }

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
  Rng(uint64_t parent_key, uint64_t salt) : key_(mix(parent_key ^ salt)) {}

  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace voxscreen
