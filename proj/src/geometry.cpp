#include "voxscreen/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace voxscreen {

bool Box3::valid() const {
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(lo(a)) || !std::isfinite(hi(a)) || !(lo(a) < hi(a))) return false;
  }
  return true;
}

BoxCenterSize Box3::center_size() const {
  return {(z0 + z1) / 2, (y0 + y1) / 2, (x0 + x1) / 2, z1 - z0, y1 - y0, x1 - x0};
}

std::string to_string(const Box3& box) {
  std::ostringstream os;
  os << "(" << box.z0 << "," << box.y0 << "," << box.x0 << "," << box.z1 << "," << box.y1 << "," << box.x1 << ")";
  return os.str();
}

double iou3d(const Box3& a, const Box3& b) {
  if (!a.valid()) throw GeometryError("iou3d: degenerate box " + to_string(a));
  if (!b.valid()) throw GeometryError("iou3d: degenerate box " + to_string(b));
  double inter = 1.0;
  for (int axis = 0; axis < 3; ++axis) {
    const double overlap = std::min(a.hi(axis), b.hi(axis)) - std::max(a.lo(axis), b.lo(axis));
    if (overlap <= 0) return 0.0;
    inter *= overlap;
  }
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

Box3 clip_box(const Box3& box, const Dims3& bounds) {
  auto clip = [](double v, int64_t hi) { return std::clamp(v, 0.0, static_cast<double>(hi)); };
  return {clip(box.z0, bounds.d), clip(box.y0, bounds.h), clip(box.x0, bounds.w),
          clip(box.z1, bounds.d), clip(box.y1, bounds.h), clip(box.x1, bounds.w)};
}

namespace {

std::vector<size_t> score_order(size_t n, auto score_of) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) { return score_of(i) > score_of(j); });
  return order;
}

}  // namespace

std::vector<Detection> nms3d(std::span<const Detection> detections, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw std::invalid_argument("nms3d: iou_threshold must lie in (0, 1]");
  }
  const auto order = score_order(detections.size(), [&](size_t i) { return detections[i].score; });
  std::vector<Detection> kept;
  for (size_t i : order) {
    const Detection& cand = detections[i];
    bool keep = true;
    for (const Detection& k : kept) {
      if (k.label == cand.label && iou3d(k.box, cand.box) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(cand);
  }
  return kept;
}

std::vector<size_t> nms_indices(std::span<const Box3> boxes, std::span<const double> scores, double iou_threshold) {
  const auto order = score_order(boxes.size(), [&](size_t i) { return scores[i]; });
  std::vector<size_t> kept;
  for (size_t i : order) {
    bool keep = true;
    for (size_t k : kept) {
      if (iou3d(boxes[k], boxes[i]) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

}  // namespace voxscreen
