#pragma once

// Procedural stand-in for baggage CT data. Bottles are hollow liquid-filled
// cylinders, handguns an L-shaped union of a barrel and a grip; both sit among
// random ellipsoid and box clutter whose intensities overlap the targets'.
//
// Every sample is a pure function of (config, index): sample i draws from
// Rng(seed).split(i), so generation can run in any order or in parallel.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxscreen/annotations.hpp"
#include "voxscreen/eval.hpp"
#include "voxscreen/rng.hpp"
#include "voxscreen/volume.hpp"

namespace voxscreen::synth {

enum class TargetClass { bottle, handgun };

std::string to_string(TargetClass c);
TargetClass parse_target(const std::string& s);

struct ClutterConfig {
  int min_shapes = 6;
  int max_shapes = 14;
  double intensity_lo = 0.2;
  double intensity_hi = 0.8;
  double noise_sigma = 0.02;
};

struct DatasetConfig {
  enum class Kind { crops, bags };
  Kind kind = Kind::crops;
  TargetClass target = TargetClass::bottle;
  Dims3 bag_dims{64, 64, 64};
  int crop_min = 16;  // crop extent range per axis
  int crop_max = 48;
  int64_t n_positive = 526;  // crops
  int64_t n_negative = 1178;
  int64_t n_volumes = 305;  // bags
  int targets_min = 1;      // per bag
  int targets_max = 2;
  int64_t total_targets = 526;  // bags; 0 draws each bag's count uniformly instead
  int voxel_scale = 1;  // bags: target and clutter geometry multiplier, like a finer scanner grid
  ClutterConfig clutter;
  uint64_t seed = 0;

  /// Sample counts mirroring the reference datasets for a kind and class.
  static DatasetConfig defaults(Kind kind, TargetClass target);
  void validate() const;
  int64_t sample_count() const { return kind == Kind::crops ? n_positive + n_negative : n_volumes; }
};

std::string to_string(DatasetConfig::Kind k);
DatasetConfig::Kind parse_kind(const std::string& s);

/// A target in its own tight grid: voxel > 0 is part of the object and holds
/// its intensity.
struct Target {
  TargetClass cls;
  Volume mask;
};

/// Random shape, size and 90-degree-multiple orientation. `scale` multiplies
/// every extent; the random draws do not depend on it.
Target gen_target(TargetClass cls, Rng& rng, int scale = 1);

struct Placement {
  Box3 box;              // annotated box
  int64_t mask_voxels = 0;
  int64_t contained = 0;  // mask voxels inside `box` after compositing
};

struct Sample {
  std::string id;
  Volume volume;
  std::vector<Annotation> boxes;  // empty for a negative crop
  std::vector<Placement> placements;
  int label = 0;  // 1 when any target is present
};

/// Whole bag with `n_targets` non-overlapping targets. Throws std::runtime_error
/// when a target cannot be placed within 100 tries.
Sample gen_bag(const DatasetConfig& cfg, int n_targets, Rng& rng);

/// Target-centred crop (positive) or clutter-only crop of comparable extent.
Sample gen_crop(const DatasetConfig& cfg, bool positive, Rng& rng);

/// Targets per bag for the whole dataset.
std::vector<int> bag_target_counts(const DatasetConfig& cfg);

/// Sample `index` of the dataset. Crops list positives first.
Sample make_sample(const DatasetConfig& cfg, int64_t index);
Sample make_sample(const DatasetConfig& cfg, int64_t index, const std::vector<int>& bag_counts);

/// Mean intensity inside annotated boxes minus mean intensity outside them.
double separability(const Sample& s);

struct GeneratedDataset {
  std::vector<ManifestEntry> entries;
  std::vector<int> labels;
};

/// Writes <out>/volumes/<id>.vol, <out>/manifest.json and <out>/splits.json.
/// Crops get stratified k-fold splits, bags repeated random splits.
GeneratedDataset gen_dataset(const DatasetConfig& cfg, const eval::SplitPlan& plan, const std::filesystem::path& out);

/// splits.json content: {"mode","seed",...,"splits":[{"train":[...],"test":[...]}]} with manifest indices.
nlohmann::json splits_to_json(const eval::SplitPlan& plan, const std::vector<eval::TrainTest>& splits);
std::vector<eval::TrainTest> splits_from_json(const nlohmann::json& j);

/// The splits a plan produces for these labels.
std::vector<eval::TrainTest> plan_splits(const eval::SplitPlan& plan, const std::vector<int>& labels);

}  // namespace voxscreen::synth
