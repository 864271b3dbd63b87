#pragma once

// Independent reference computations used only by tests.

#include <algorithm>
#include <cstdint>

#include "voxscreen/geometry.hpp"

namespace oracle {

/// IoU of integer-corner boxes by counting unit voxels on a grid.
inline double raster_iou(const voxscreen::Box3& a, const voxscreen::Box3& b) {
  const auto lo = [&](int axis) { return static_cast<int64_t>(std::min(a.lo(axis), b.lo(axis))); };
  const auto hi = [&](int axis) { return static_cast<int64_t>(std::max(a.hi(axis), b.hi(axis))); };
  const auto inside = [](const voxscreen::Box3& box, int64_t z, int64_t y, int64_t x) {
    // voxel [z,z+1) lies in the box iff its lower corner does (integer corners)
    return z >= box.z0 && z < box.z1 && y >= box.y0 && y < box.y1 && x >= box.x0 && x < box.x1;
  };
  int64_t inter = 0, uni = 0;
  for (int64_t z = lo(0); z < hi(0); ++z)
    for (int64_t y = lo(1); y < hi(1); ++y)
      for (int64_t x = lo(2); x < hi(2); ++x) {
        const bool ia = inside(a, z, y, x), ib = inside(b, z, y, x);
        inter += ia && ib;
        uni += ia || ib;
      }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

}  // namespace oracle
