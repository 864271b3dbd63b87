#pragma once

// Experiment runners: classifier training and k-fold evaluation, detector
// training and repeated-split evaluation. Used by the CLI and the acceptance
// suite.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "voxscreen/annotations.hpp"
#include "voxscreen/detectors.hpp"
#include "voxscreen/eval.hpp"
#include "voxscreen/models.hpp"
#include "voxscreen/optim.hpp"
#include "voxscreen/preprocess.hpp"
#include "voxscreen/synthgen.hpp"

namespace voxscreen::protocol {

struct Dataset {
  std::vector<Volume> volumes;
  std::vector<std::vector<Annotation>> boxes;
  std::vector<int> labels;  // 1 when a volume holds any box

  size_t size() const { return volumes.size(); }
  std::vector<Box3> boxes_of(size_t i) const;
  std::vector<eval::GroundTruth> ground_truth(std::span<const size_t> idx) const;
};

Dataset load_dataset(const std::filesystem::path& manifest);
Dataset synth_dataset(const synth::DatasetConfig& cfg);

/// Called after every optimizer step.
using LossLog = std::function<void(int64_t step, double loss)>;

struct ClsRun {
  models::ModelSpec model;
  preprocess::PreprocessConfig pre;
  nn::TrainConfig train;
  eval::EvalConfig eval;
  uint64_t seed = 0;
};

/// Volumes as the classifier sees them: rescaled with pre.s, or unchanged when
/// rescaling is off.
std::vector<Volume> classifier_inputs(const Dataset& data, const preprocess::PreprocessConfig& pre);

/// Binary cross-entropy training on `inputs[idx]`, with rotation augmentation
/// drawn per step.
void train_classifier(models::Classifier<float>& model, const std::vector<Volume>& inputs, const std::vector<int>& labels,
                      std::span<const size_t> idx, const ClsRun& run, const LossLog& log = {});

/// Eval-mode probabilities for inputs[idx].
std::vector<double> score_classifier(models::Classifier<float>& model, const std::vector<Volume>& inputs,
                                     std::span<const size_t> idx);

struct FoldResult {
  eval::ClassMetrics metrics;
  std::vector<double> losses;
  double train_seconds = 0;
};

using FoldLog = std::function<void(size_t fold, const FoldResult&)>;

/// Train a fresh classifier per split (seeded by split index) and score its
/// test part. `max_splits` > 0 stops early.
std::vector<FoldResult> cross_validate(const Dataset& data, const std::vector<eval::TrainTest>& splits, const ClsRun& run,
                                       int max_splits = 0, const FoldLog& log = {});

struct DetRun {
  detect::DetectorConfig detector;
  preprocess::PreprocessConfig pre;
  nn::TrainConfig train;
  eval::EvalConfig eval;
  uint64_t seed = 0;
};

void train_detector(detect::Detector& model, const Dataset& data, std::span<const size_t> idx, const DetRun& run,
                    const LossLog& log = {});

/// detect() with score threshold 0 over data[idx]: everything AP needs.
std::vector<Detection> run_detector(detect::Detector& model, const Dataset& data, std::span<const size_t> idx,
                                    const DetRun& run);

struct SplitResult {
  eval::PrMetrics pr;
  double ap = 0;
  std::vector<Detection> detections;
  std::vector<eval::GroundTruth> truth;
  std::vector<double> losses;
  double train_seconds = 0;
};

using SplitLog = std::function<void(size_t split, const SplitResult&)>;

std::vector<SplitResult> evaluate_detector(const Dataset& data, const std::vector<eval::TrainTest>& splits,
                                           const DetRun& run, int max_splits = 0, const SplitLog& log = {});

}  // namespace voxscreen::protocol
