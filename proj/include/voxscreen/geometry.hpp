#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxscreen/volume.hpp"

namespace voxscreen {

struct BoxCenterSize;

/// Axis-aligned box in voxel units, half-open corners [z0,z1) x [y0,y1) x [x0,x1).
struct Box3 {
  double z0 = 0, y0 = 0, x0 = 0;
  double z1 = 0, y1 = 0, x1 = 0;

  static Box3 from_array(const std::array<double, 6>& c) { return {c[0], c[1], c[2], c[3], c[4], c[5]}; }
  std::array<double, 6> to_array() const { return {z0, y0, x0, z1, y1, x1}; }

  double extent(int axis) const { return axis == 0 ? z1 - z0 : axis == 1 ? y1 - y0 : x1 - x0; }
  double lo(int axis) const { return axis == 0 ? z0 : axis == 1 ? y0 : x0; }
  double hi(int axis) const { return axis == 0 ? z1 : axis == 1 ? y1 : x1; }
  double volume() const { return extent(0) * extent(1) * extent(2); }
  bool valid() const;

  BoxCenterSize center_size() const;
  bool operator==(const Box3&) const = default;
};

/// Center-size form: centers (cz,cy,cx) and extents (d,h,w) along (z,y,x).
struct BoxCenterSize {
  double cz = 0, cy = 0, cx = 0;
  double d = 0, h = 0, w = 0;

  Box3 corners() const { return {cz - d / 2, cy - h / 2, cx - w / 2, cz + d / 2, cy + h / 2, cx + w / 2}; }
  double volume() const { return d * h * w; }
};

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Box3& box);

/// Continuous intersection-over-union. Throws GeometryError for degenerate boxes.
double iou3d(const Box3& a, const Box3& b);

/// Clip a box to [0, dims) on each axis.
Box3 clip_box(const Box3& box, const Dims3& bounds);

struct Detection {
  std::string volume_id;
  Box3 box;
  std::string label;
  double score = 0.0;
};

/// Greedy class-aware suppression. Candidates are visited by descending score
/// (stable for ties); one is kept iff its IoU with every kept detection of the
/// same label is <= iou_threshold.
std::vector<Detection> nms3d(std::span<const Detection> detections, double iou_threshold);

/// Index form of nms3d over raw boxes of a single class, used inside detectors.
std::vector<size_t> nms_indices(std::span<const Box3> boxes, std::span<const double> scores, double iou_threshold);

}  // namespace voxscreen
