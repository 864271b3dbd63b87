#pragma once

// Multi-level 3D anchors and the box regression parametrisation.
//
// Ratios are (rh : rw : rd) triples. With (z,y,x) = (depth, height, width), an
// anchor of size a and ratio r has extents
//   d = a * rd / c,  h = a * rh / c,  w = a * rw / c,   c = cbrt(rh * rw * rd)
// so every anchor of size a has volume a^3.
//
// Anchor order within a level is k-major: index = k * (d*h*w) + voxel, where
// k = multiplier_index * |ratios| + ratio_index. This matches the channel
// layout of a head convolution with K outputs per voxel.

#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxscreen/geometry.hpp"

namespace voxscreen::detect {

struct AnchorConfig {
  std::array<double, 4> sizes{8, 16, 32, 64};
  std::vector<std::array<double, 3>> ratios = default_ratios();
  std::vector<double> scale_multipliers{1.0};
  std::array<int64_t, 4> strides{4, 8, 16, 32};

  static std::vector<std::array<double, 3>> default_ratios();
  /// {1} for the two-stage family, {1, 2^(1/3), 2^(2/3)} for the one-stage one.
  static std::vector<double> multipliers_for(const std::string& family);
  /// Sizes for "4-8-16-32", "6-12-24-48", "8-12-16-24" or "8-16-32-64".
  static std::array<double, 4> preset_sizes(const std::string& name);
  static const std::vector<std::string>& preset_names();

  int64_t per_voxel() const { return int64_t(ratios.size() * scale_multipliers.size()); }
  std::string sizes_label() const;  // e.g. "8-16-32-64"
  void validate() const;
};

/// Anchors of level l (1..4) over a feature volume of `feature` dims.
std::vector<BoxCenterSize> generate_anchors(int level, const Dims3& feature, const AnchorConfig& cfg);

using Deltas = std::array<double, 6>;

/// ((cz-cz_a)/d_a, (cy-cy_a)/h_a, (cx-cx_a)/w_a, ln(d/d_a), ln(h/h_a), ln(w/w_a)).
Deltas encode(const Box3& gt, const Box3& anchor);

/// Inverse of encode. Log-extent deltas are clamped at ln(1000/16) so an
/// untrained head cannot overflow exp().
Box3 decode(const Deltas& deltas, const Box3& anchor);

inline constexpr double kMaxLogDelta = 4.135166556742356;  // ln(1000/16)

}  // namespace voxscreen::detect
