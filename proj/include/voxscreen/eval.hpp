#pragma once

// Evaluation protocol: data splits, classification rates, detection
// precision/recall and average precision, and mean ± std aggregation.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxscreen/geometry.hpp"

namespace voxscreen::eval {

struct EvalConfig {
  double iou_threshold = 0.1;
  double score_threshold = 0.9;
  double nms_iou = 0.3;
  double classification_threshold = 0.5;
  bool ap_prefilter = false;  // compute AP only over detections above score_threshold

  void validate() const;
};

struct SplitPlan {
  enum class Mode { kfold, random };
  Mode mode = Mode::kfold;
  int k = 10;
  double train_fraction = 0.8;
  int n_repeats = 3;
  uint64_t seed = 0;

  void validate() const;
};

struct TrainTest {
  std::vector<size_t> train, test;
};

/// Stratified k-fold partition of 0..n-1. Each class is shuffled with `seed`
/// and dealt round-robin, so every fold's positive count is within one of
/// npos / k. Throws if a class has fewer than k members.
std::vector<std::vector<size_t>> kfold_split(std::span<const int> labels, int k, uint64_t seed);

/// Fold i as test set, the remaining folds as training set.
std::vector<TrainTest> kfold_train_test(const std::vector<std::vector<size_t>>& folds);

/// `repeats` independent shuffles of 0..n-1, each cut at round(n * train_fraction).
std::vector<TrainTest> random_splits(size_t n, double train_fraction, int repeats, uint64_t seed);

struct ClassMetrics {
  double tpr = 0;  // percent; NaN without positives
  double fpr = 0;  // percent; NaN without negatives
  int64_t tp = 0, fn = 0, fp = 0, tn = 0;
  std::string diagnostic;
};

ClassMetrics classification_metrics(std::span<const double> scores, std::span<const int> labels,
                                    double threshold = 0.5);

struct GroundTruth {
  std::string volume_id;
  std::string label;
  Box3 box;
};

struct PrMetrics {
  double precision = 0;  // percent; NaN when no detection is kept
  double recall = 0;     // percent
  int64_t tp = 0, kept = 0, n_gt = 0;
  std::string diagnostic;
};

/// Precision and recall over detections scoring >= cfg.score_threshold.
PrMetrics detection_pr(std::span<const Detection> dets, std::span<const GroundTruth> gts, const EvalConfig& cfg);

struct PrPoint {
  double score, precision, recall;  // fractions in [0,1]
};

/// Ranked precision/recall after each detection (descending score, ties in
/// input order). A detection is a true positive when it overlaps an unmatched
/// ground truth of its volume and label at IoU >= iou_threshold; it takes the
/// best such match.
std::vector<PrPoint> pr_curve(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                              double iou_threshold);

/// All-point interpolated AP in percent. Throws without ground truth.
double average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_threshold);

struct Summary {
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 for a single run
  int64_t n = 0;

  std::string format() const;  // "m ± s", two decimals
  nlohmann::json to_json() const { return {{"mean", mean}, {"std", std}, {"n", n}}; }
};

Summary aggregate(std::span<const double> runs);

/// Plain-text table with columns padded to their widest cell.
std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

}  // namespace voxscreen::eval
