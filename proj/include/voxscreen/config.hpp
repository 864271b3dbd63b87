#pragma once

// Run configuration: one JSON file with a section per module. Missing keys
// keep their defaults, unknown keys are errors, and every section is
// validated after loading.
//
//   {
//     "seed": 0, "out_dir": "runs/x",
//     "dataset":    {"kind": "crops", "target": "bottle", "path": "", ...},
//     "preprocess": {"s": 32, "rescale": true, "rotation_probability": 0.5, "resample_factor": "1/3"},
//     "model":      {"arch": "resnet3d-10-rich", "base_channels": 32, "fpn_channels": 64, "norm": "group"},
//     "detector":   {"family": "retinanet3d", "backbone": "resnet3d-10", "anchors": {"preset": "8-16-32-64"},
//                    "match": {...}, ...},
//     "train": {...}, "eval": {...}, "split": {"mode": "kfold", "k": 10, ...}
//   }

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxscreen/detectors.hpp"
#include "voxscreen/eval.hpp"
#include "voxscreen/models.hpp"
#include "voxscreen/optim.hpp"
#include "voxscreen/preprocess.hpp"
#include "voxscreen/synthgen.hpp"

namespace voxscreen::config {

/// Bad config content: unknown key, wrong type or a failed section check.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  uint64_t seed = 0;  // dataset, splits and weight init all derive from it
  std::string out_dir = "out";
  synth::DatasetConfig dataset;
  std::string dataset_path;  // generated dataset directory; empty synthesizes in memory
  preprocess::PreprocessConfig preprocess;
  models::ModelSpec model;
  detect::DetectorConfig detector;
  nn::TrainConfig train;
  eval::EvalConfig eval;
  eval::SplitPlan split;

  void validate() const;
  /// Full config, defaults included. from_json(to_json()) round-trips.
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

/// Set a dotted key, e.g. "detector.anchors.preset=8-16-32-64". The value is
/// parsed as JSON when it is valid JSON and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Read the file (or start from {} when `path` is empty), apply overrides in
/// order, then parse.
RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace voxscreen::config
