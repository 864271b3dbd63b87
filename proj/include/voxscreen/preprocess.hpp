#pragma once

#include <string>

#include "voxscreen/rng.hpp"
#include "voxscreen/volume.hpp"

namespace voxscreen::preprocess {

struct PreprocessConfig {
  int s = 32;                                // rescaling value
  bool rescale = true;                       // classifier rescaling on/off (ablation switch)
  double rotation_probability = 0.5;         // training-time rotation augmentation
  double resample_factor = 1.0 / 3.0;        // uniform detection resampling

  void validate() const;
};

/// Parse "p/q" or a decimal literal into a factor.
double parse_factor(const std::string& text);

/// Per-axis integer factors max{1, floor(dim / s)}.
Dims3 rescale_factors(const Dims3& dims, int s);

/// Block-mean downsampling by integer factors. Output dims are ceil(dim / f);
/// a partial block at the upper boundary averages the voxels it has.
Volume downsample_mean(const Volume& v, const Dims3& factors);

/// Downsample with rescale_factors(v.dims(), s). Every output axis is < 2s.
Volume rescale_volume(const Volume& v, int s);

/// Uniform resampling by `factor` in (0, 1]. When 1/factor is an integer k this
/// is block-mean pooling by k (so coordinates scale by exactly k); otherwise
/// trilinear sampling at voxel centres with dims round(dim * factor).
Volume resample_volume(const Volume& v, double factor);

/// Exact voxel scale between a resampled volume and its source, per axis.
struct AxisScale {
  double z = 1, y = 1, x = 1;
};
AxisScale resample_scale(const Dims3& source, const Dims3& resampled, double factor);

enum class Plane { xy, yz, xz };

std::string to_string(Plane p);

/// Lossless rotation by 90, 180 or 270 degrees within a plane. A quarter turn
/// in xy maps (y, x) -> (x, H-1-y), so dims (D,H,W) become (D,W,H).
Volume rotate90(const Volume& v, Plane plane, int angle_degrees);

/// With probability cfg.rotation_probability, one uniformly chosen
/// (plane, angle) rotation; otherwise a copy of v.
Volume augment(const Volume& v, const PreprocessConfig& cfg, Rng& rng);

}  // namespace voxscreen::preprocess
