#pragma once

// One-stage (RetinaNet-style) and two-stage (Faster R-CNN-style) 3D detectors
// on a ResNet3D + FPN trunk, with anchor matching, losses and the end-to-end
// resample -> predict -> NMS -> map-back pipeline.
//
// A detector works in the frame of the resampled volume; anchor sizes, strides
// and ground truth passed to loss() are all in that frame.

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxscreen/anchors.hpp"
#include "voxscreen/eval.hpp"
#include "voxscreen/geometry.hpp"
#include "voxscreen/models.hpp"
#include "voxscreen/optim.hpp"
#include "voxscreen/preprocess.hpp"

namespace voxscreen::detect {

using nn::Tensor;

struct MatchConfig {
  double pos_iou = 0.35;
  double neg_iou = 0.25;
  bool force_best_match = true;
  int64_t proposals_per_volume = 128;
  double rpn_nms_iou = 0.5;

  void validate() const;
};

inline constexpr int64_t kNegative = -1;
inline constexpr int64_t kIgnore = -2;

/// Per-anchor assignment: a gt index (positive), kNegative or kIgnore.
/// With force_best_match each gt, in order, also claims its highest-IoU
/// anchor not claimed by an earlier gt (lowest index on ties), even at IoU 0.
std::vector<int64_t> match_anchors(std::span<const Box3> anchors, std::span<const Box3> gts, const MatchConfig& cfg);

struct DetectorConfig {
  std::string family = "retinanet3d";  // retinanet3d | fasterrcnn3d
  std::string label = "handgun";       // class name written into detections
  models::ModelSpec backbone{"resnet3d", 10, false, 16, 32, models::NormKind::group};
  AnchorConfig anchors;  // sizes in resampled-frame voxels
  MatchConfig match;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  bool augment = false;  // random per-axis flips and y/x transposes while training

  void validate() const;
};

struct LossStats {
  double cls = 0, box = 0;          // one-stage terms, or the RoI terms of the two-stage model
  double rpn_cls = 0, rpn_box = 0;  // two-stage only
  int64_t positives = 0;
  int64_t discarded_proposals = 0;
};

struct ScoredBox {
  Box3 box;
  double score;
};

class Detector : public models::Module<float> {
 public:
  Detector(const DetectorConfig& cfg, double resample_factor, uint64_t seed);

  const DetectorConfig& config() const { return cfg_; }
  double resample_factor() const { return resample_factor_; }
  const AnchorConfig& anchors() const { return cfg_.anchors; }

  /// Training loss for x [1,1,D,H,W] with ground truth in the same frame.
  virtual Tensor<float> loss(const Tensor<float>& x, std::span<const Box3> gts, Rng& rng, LossStats* stats) = 0;
  /// Eval-mode boxes in the input frame after NMS at nms_iou, clipped to the
  /// input extent, sorted by descending score.
  virtual std::vector<ScoredBox> predict(const Tensor<float>& x, double nms_iou) = 0;

 protected:
  std::array<Tensor<float>, 4> features(const Tensor<float>& x);
  /// Corner-form anchors of each pyramid level for these feature maps.
  std::array<std::vector<Box3>, 4> level_anchors(const std::array<Tensor<float>, 4>& feats) const;

  DetectorConfig cfg_;
  double resample_factor_;
  Rng init_rng_;  // parameter initialisation stream, shared with the heads
  std::unique_ptr<models::Backbone<float>> backbone_;
  std::unique_ptr<models::Fpn<float>> fpn_;
};

class RetinaNet3d : public Detector {
 public:
  RetinaNet3d(const DetectorConfig& cfg, double resample_factor, uint64_t seed);

  struct LevelOutput {
    Tensor<float> cls;  // [1, K, d, h, w] logits
    Tensor<float> box;  // [1, 6K, d, h, w], channel k*6+j
  };
  std::array<LevelOutput, 4> head_outputs(const Tensor<float>& x);

  Tensor<float> loss(const Tensor<float>& x, std::span<const Box3> gts, Rng& rng, LossStats* stats) override;
  std::vector<ScoredBox> predict(const Tensor<float>& x, double nms_iou) override;

 private:
  std::array<LevelOutput, 4> heads(const std::array<Tensor<float>, 4>& feats);

  std::vector<std::unique_ptr<models::Conv3d<float>>> cls_tower_, box_tower_;
  std::unique_ptr<models::Conv3d<float>> cls_out_, box_out_;
};

class FasterRcnn3d : public Detector {
 public:
  FasterRcnn3d(const DetectorConfig& cfg, double resample_factor, uint64_t seed);

  static constexpr int64_t kRoiHidden = 128;
  static constexpr nn::Int3 kRoiOut{2, 2, 2};

  struct Proposals {
    std::vector<Box3> boxes;
    std::vector<double> scores;
    int64_t discarded = 0;  // decoded with non-positive extent after clipping
  };
  /// RPN proposals for x, at most match.proposals_per_volume.
  Proposals propose(const Tensor<float>& x);
  /// Pyramid level (1..4) a box of this volume is pooled from.
  int roi_level(const Box3& box) const;

  Tensor<float> loss(const Tensor<float>& x, std::span<const Box3> gts, Rng& rng, LossStats* stats) override;
  std::vector<ScoredBox> predict(const Tensor<float>& x, double nms_iou) override;

 private:
  struct RpnOutput {
    Tensor<float> cls, box;
  };
  std::array<RpnOutput, 4> rpn(const std::array<Tensor<float>, 4>& feats);
  Proposals proposals_from(const std::array<RpnOutput, 4>& out, const std::array<std::vector<Box3>, 4>& anchors,
                           const Dims3& input, size_t pre_nms_per_level);
  /// Stage-two logits [R,1] and deltas [R,6], rows in `boxes` order.
  std::pair<Tensor<float>, Tensor<float>> roi_head(const std::array<Tensor<float>, 4>& feats,
                                                   const std::vector<Box3>& boxes, std::vector<size_t>& order);

  std::unique_ptr<models::Conv3d<float>> rpn_conv_, rpn_cls_, rpn_box_;
  std::unique_ptr<models::Linear<float>> fc1_, fc2_, roi_cls_, roi_box_;
};

std::unique_ptr<Detector> make_detector(const DetectorConfig& cfg, double resample_factor, uint64_t seed);

/// Smallest resampled extent per axis the trunk accepts.
inline constexpr int64_t kMinDetectExtent = 8;

/// Resample, predict, drop scores below score_threshold, NMS, and map boxes
/// back to clipped original-voxel coordinates.
std::vector<Detection> detect(Detector& model, const Volume& v, const preprocess::PreprocessConfig& pre,
                              double nms_iou, double score_threshold);
inline std::vector<Detection> detect(Detector& model, const Volume& v, const preprocess::PreprocessConfig& pre,
                                     const eval::EvalConfig& ev) {
  return detect(model, v, pre, ev.nms_iou, ev.score_threshold);
}

struct DetSample {
  std::string id;
  Tensor<float> x;         // resampled volume [1,1,d,h,w]
  std::vector<Box3> gts;   // in the resampled frame
};

/// Resample `v` and express `boxes` (original voxels) in the resampled frame.
DetSample prepare_sample(const Volume& v, std::span<const Box3> boxes, double resample_factor);

/// Mirror `s` along the chosen (z, y, x) axes, then optionally swap y and x.
/// Boxes follow exactly, so the sample stays consistent.
DetSample flip_sample(const DetSample& s, std::array<bool, 3> flip, bool transpose_yx);

using StepCallback = std::function<void(int64_t step, double loss, const LossStats& stats)>;

/// Adam over tc.total_steps(n) steps; each step accumulates batch_size
/// per-volume losses drawn from a fresh shuffle every epoch. With
/// config().augment each drawn sample gets a random flip_sample.
void train_detector(Detector& model, std::span<const DetSample> data, const nn::TrainConfig& tc, uint64_t seed,
                    const StepCallback& on_step = {});

struct LatencyStats {
  double mean_s = 0, median_s = 0, p95_s = 0;
  int64_t n = 0;

  nlohmann::json to_json() const { return {{"mean_s", mean_s}, {"median_s", median_s}, {"p95_s", p95_s}, {"n", n}}; }
};

LatencyStats latency_stats(std::vector<double> samples);

/// Wall-clock seconds of detect() per volume.
LatencyStats bench_inference(Detector& model, std::span<const Volume> volumes, const preprocess::PreprocessConfig& pre,
                             const eval::EvalConfig& ev);

}  // namespace voxscreen::detect
