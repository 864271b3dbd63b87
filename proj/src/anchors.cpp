#include "voxscreen/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voxscreen::detect {

std::vector<std::array<double, 3>> AnchorConfig::default_ratios() {
  const double r2 = std::sqrt(2.0);
  return {{1.0, 2.0, r2}, {1.0, 1.0, 1.0}, {2.0, 1.0, r2}};
}

std::vector<double> AnchorConfig::multipliers_for(const std::string& family) {
  if (family == "retinanet3d") return {1.0, std::cbrt(2.0), std::cbrt(4.0)};
  if (family == "fasterrcnn3d") return {1.0};
  throw std::invalid_argument("unknown detector family \"" + family + "\"");
}

const std::vector<std::string>& AnchorConfig::preset_names() {
  static const std::vector<std::string> names{"4-8-16-32", "6-12-24-48", "8-12-16-24", "8-16-32-64"};
  return names;
}

std::array<double, 4> AnchorConfig::preset_sizes(const std::string& name) {
  if (name == "4-8-16-32") return {4, 8, 16, 32};
  if (name == "6-12-24-48") return {6, 12, 24, 48};
  if (name == "8-12-16-24") return {8, 12, 16, 24};
  if (name == "8-16-32-64") return {8, 16, 32, 64};
  throw std::invalid_argument("unknown anchor preset \"" + name + "\"");
}

std::string AnchorConfig::sizes_label() const {
  std::string s;
  for (int l = 0; l < 4; ++l) {
    if (l) s += "-";
    const double v = sizes[l];
    s += v == std::floor(v) ? std::to_string(int64_t(v)) : std::to_string(v);
  }
  return s;
}

void AnchorConfig::validate() const {
  for (int l = 0; l < 4; ++l) {
    if (!(sizes[l] > 0)) throw std::invalid_argument("anchor sizes must be positive");
    if (l > 0 && !(sizes[l] > sizes[l - 1])) throw std::invalid_argument("anchor sizes must increase across levels");
    if (strides[l] < 1) throw std::invalid_argument("anchor strides must be positive");
  }
  if (ratios.empty()) throw std::invalid_argument("anchor ratios must not be empty");
  for (const auto& r : ratios) {
    if (!(r[0] > 0 && r[1] > 0 && r[2] > 0)) throw std::invalid_argument("anchor ratios must be positive");
  }
  if (scale_multipliers.empty()) throw std::invalid_argument("anchor scale multipliers must not be empty");
  for (double m : scale_multipliers) {
    if (!(m > 0)) throw std::invalid_argument("anchor scale multipliers must be positive");
  }
}

std::vector<BoxCenterSize> generate_anchors(int level, const Dims3& feature, const AnchorConfig& cfg) {
  if (level < 1 || level > 4) throw std::invalid_argument("anchor level must be 1..4");
  const double stride = double(cfg.strides[level - 1]);
  const int64_t voxels = feature.voxels();
  std::vector<BoxCenterSize> out;
  out.reserve(static_cast<size_t>(voxels * cfg.per_voxel()));
  for (double m : cfg.scale_multipliers) {
    const double a = cfg.sizes[level - 1] * m;
    for (const auto& [rh, rw, rd] : cfg.ratios) {
      const double c = std::cbrt(rh * rw * rd);
      const double d = a * rd / c, h = a * rh / c, w = a * rw / c;
      for (int64_t z = 0; z < feature.d; ++z)
        for (int64_t y = 0; y < feature.h; ++y)
          for (int64_t x = 0; x < feature.w; ++x) {
            out.push_back({(double(z) + 0.5) * stride, (double(y) + 0.5) * stride, (double(x) + 0.5) * stride, d, h, w});
          }
    }
  }
  return out;
}

Deltas encode(const Box3& gt, const Box3& anchor) {
  const BoxCenterSize g = gt.center_size(), a = anchor.center_size();
  if (!(g.d > 0 && g.h > 0 && g.w > 0)) throw GeometryError("encode: ground-truth box has non-positive extent");
  if (!(a.d > 0 && a.h > 0 && a.w > 0)) throw GeometryError("encode: anchor has non-positive extent");
  return {(g.cz - a.cz) / a.d, (g.cy - a.cy) / a.h, (g.cx - a.cx) / a.w,
          std::log(g.d / a.d), std::log(g.h / a.h), std::log(g.w / a.w)};
}

Box3 decode(const Deltas& t, const Box3& anchor) {
  const BoxCenterSize a = anchor.center_size();
  const auto ext = [](double v) { return std::exp(std::min(v, kMaxLogDelta)); };
  BoxCenterSize b{a.cz + t[0] * a.d, a.cy + t[1] * a.h, a.cx + t[2] * a.w,
                  a.d * ext(t[3]), a.h * ext(t[4]), a.w * ext(t[5])};
  return b.corners();
}

}  // namespace voxscreen::detect
