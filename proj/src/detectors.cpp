#include "voxscreen/detectors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "voxscreen/losses.hpp"

namespace voxscreen::detect {

namespace {

using models::Conv3d;
using models::Linear;
using nn::Int3;

constexpr double kSmoothL1Beta = 1.0 / 9.0;
constexpr double kPriorProbability = 0.01;
constexpr double kScorePrefilter = 0.01;
constexpr size_t kTopPerLevel = 1000;
constexpr int64_t kRpnBatch = 256;
constexpr double kRpnPositiveFraction = 0.5;
constexpr int64_t kRoiBatch = 64;
constexpr double kRoiPositiveFraction = 0.25;
constexpr int64_t kHeadConvs = 4;

void init_normal(Tensor<float>& w, Rng& rng, double stdev) {
  for (auto& v : w.values()) v = static_cast<float>(rng.normal() * stdev);
}

// Tower layers keep Conv3d's He init: at desk widths a fixed std of 0.01
// shrinks the signal about 5x per layer. Output layers take `stdev`.
std::unique_ptr<Conv3d<float>> conv(int64_t in, int64_t out, int64_t k, Rng& rng, double stdev = 0.0) {
  const int64_t pad = k / 2;
  auto c = std::make_unique<Conv3d<float>>(in, out, Int3{k, k, k}, Int3{1, 1, 1}, Int3{pad, pad, pad}, true, rng);
  if (stdev > 0) init_normal(c->weight, rng, stdev);
  return c;
}

Dims3 spatial(const Tensor<float>& t) { return {t.dim(2), t.dim(3), t.dim(4)}; }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Indices of the `k` largest scores, descending, lowest index first on ties.
std::vector<size_t> top_k(const std::vector<double>& scores, const std::vector<size_t>& candidates, size_t k) {
  std::vector<size_t> idx = candidates;
  const auto better = [&](size_t a, size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  if (idx.size() > k) {
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
  } else {
    std::sort(idx.begin(), idx.end(), better);
  }
  return idx;
}

Deltas deltas_at(const Tensor<float>& box, int64_t k, int64_t voxel, int64_t dhw) {
  Deltas t;
  const float* p = box.data();
  for (int j = 0; j < 6; ++j) t[j] = p[(k * 6 + j) * dhw + voxel];
  return t;
}

bool has_volume(const Box3& b) { return b.z1 > b.z0 && b.y1 > b.y0 && b.x1 > b.x0; }

/// Decode, clip and score the top anchors of one level.
void collect_level(const Tensor<float>& cls, const Tensor<float>& box, const std::vector<Box3>& anchors,
                   const Dims3& input, double min_score, size_t top, std::vector<ScoredBox>& out, int64_t* discarded) {
  const int64_t dhw = cls.dim(2) * cls.dim(3) * cls.dim(4);
  std::vector<double> scores(anchors.size());
  std::vector<size_t> candidates;
  const float* logits = cls.data();
  for (size_t i = 0; i < anchors.size(); ++i) {
    scores[i] = sigmoid(logits[i]);
    if (scores[i] >= min_score) candidates.push_back(i);
  }
  for (size_t i : top_k(scores, candidates, top)) {
    const auto k = static_cast<int64_t>(i) / dhw, v = static_cast<int64_t>(i) % dhw;
    const Box3 b = clip_box(decode(deltas_at(box, k, v, dhw), anchors[i]), input);
    if (!has_volume(b)) {
      if (discarded) ++*discarded;
      continue;
    }
    out.push_back({b, scores[i]});
  }
}

std::vector<ScoredBox> nms_scored(const std::vector<ScoredBox>& boxes, double iou, size_t keep) {
  std::vector<Box3> b;
  std::vector<double> s;
  for (const auto& x : boxes) {
    b.push_back(x.box);
    s.push_back(x.score);
  }
  std::vector<ScoredBox> out;
  for (size_t i : nms_indices(b, s, iou)) {
    if (out.size() == keep) break;
    out.push_back(boxes[i]);
  }
  return out;
}

/// Random subset of positives (at most max_pos) and negatives filling `batch`;
/// other anchors become ignored.
void subsample(std::vector<int64_t>& assign, int64_t batch, double positive_fraction, Rng& rng) {
  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < assign.size(); ++i) {
    if (assign[i] >= 0) pos.push_back(i);
    if (assign[i] == kNegative) neg.push_back(i);
  }
  const auto shuffle = [&](std::vector<size_t>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[size_t(rng.uniform_int(0, int64_t(i) - 1))]);
  };
  shuffle(pos);
  shuffle(neg);
  const size_t max_pos = static_cast<size_t>(double(batch) * positive_fraction);
  const size_t n_pos = std::min(pos.size(), max_pos);
  const size_t n_neg = std::min(neg.size(), static_cast<size_t>(batch) - n_pos);
  for (size_t i = n_pos; i < pos.size(); ++i) assign[pos[i]] = kIgnore;
  for (size_t i = n_neg; i < neg.size(); ++i) assign[neg[i]] = kIgnore;
}

struct HeadTargets {
  std::vector<float> y, cls_w, t, box_w;
  int64_t positives = 0;
};

/// Targets in head layout: logits k*dhw+v and deltas (k*6+j)*dhw+v.
HeadTargets head_targets(const std::vector<int64_t>& assign, size_t offset, const std::vector<Box3>& anchors,
                         std::span<const Box3> gts, int64_t dhw) {
  HeadTargets h;
  const size_t n = anchors.size();
  h.y.assign(n, 0.f);
  h.cls_w.assign(n, 0.f);
  h.t.assign(n * 6, 0.f);
  h.box_w.assign(n * 6, 0.f);
  for (size_t i = 0; i < n; ++i) {
    const int64_t a = assign[offset + i];
    if (a == kIgnore) continue;
    h.cls_w[i] = 1.f;
    if (a < 0) continue;
    h.y[i] = 1.f;
    ++h.positives;
    const Deltas d = encode(gts[static_cast<size_t>(a)], anchors[i]);
    const auto k = static_cast<int64_t>(i) / dhw, v = static_cast<int64_t>(i) % dhw;
    for (int j = 0; j < 6; ++j) {
      const auto idx = static_cast<size_t>((k * 6 + j) * dhw + v);
      h.t[idx] = static_cast<float>(d[j]);
      h.box_w[idx] = 1.f;
    }
  }
  return h;
}

std::vector<Box3> flatten(const std::array<std::vector<Box3>, 4>& levels) {
  std::vector<Box3> all;
  for (const auto& l : levels) all.insert(all.end(), l.begin(), l.end());
  return all;
}

Tensor<float> accumulate(const Tensor<float>& acc, const Tensor<float>& term) {
  return acc.defined() ? nn::add(acc, term) : term;
}

}  // namespace

// Matching --------------------------------------------------------------------

void MatchConfig::validate() const {
  if (!(neg_iou > 0 && neg_iou <= pos_iou && pos_iou < 1)) {
    throw std::invalid_argument("detector.match: need 0 < neg_iou <= pos_iou < 1");
  }
  if (proposals_per_volume < 1) throw std::invalid_argument("detector.match.proposals_per_volume must be >= 1");
  if (!(rpn_nms_iou > 0 && rpn_nms_iou < 1)) throw std::invalid_argument("detector.match.rpn_nms_iou must lie in (0,1)");
}

std::vector<int64_t> match_anchors(std::span<const Box3> anchors, std::span<const Box3> gts, const MatchConfig& cfg) {
  std::vector<int64_t> assign(anchors.size(), kNegative);
  if (gts.empty() || anchors.empty()) return assign;
  const size_t n = anchors.size();
  std::vector<double> iou(n * gts.size());
  std::vector<double> best_iou(n, -1.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t g = 0; g < gts.size(); ++g) {
      iou[g * n + i] = iou3d(anchors[i], gts[g]);
      if (iou[g * n + i] > best_iou[i]) {
        best_iou[i] = iou[g * n + i];
        assign[i] = static_cast<int64_t>(g);
      }
    }
  }
  for (size_t i = 0; i < n; ++i) {
    if (best_iou[i] >= cfg.pos_iou) continue;
    assign[i] = best_iou[i] < cfg.neg_iou ? kNegative : kIgnore;
  }
  if (cfg.force_best_match) {
    // each gt claims its best anchor not already claimed by an earlier gt, so
    // two gts sharing an argmax still both end up with a positive
    std::vector<bool> claimed(n, false);
    for (size_t g = 0; g < gts.size(); ++g) {
      size_t best = n;
      for (size_t i = 0; i < n; ++i) {
        if (!claimed[i] && (best == n || iou[g * n + i] > iou[g * n + best])) best = i;
      }
      if (best == n) break;
      claimed[best] = true;
      assign[best] = static_cast<int64_t>(g);
    }
  }
  return assign;
}

// Detector base ---------------------------------------------------------------

void DetectorConfig::validate() const {
  if (family != "retinanet3d" && family != "fasterrcnn3d") {
    throw std::invalid_argument("detector.family must be retinanet3d or fasterrcnn3d, got \"" + family + "\"");
  }
  if (label.empty()) throw std::invalid_argument("detector.label must not be empty");
  backbone.validate();
  if (backbone.family != "resnet3d") throw std::invalid_argument("detector.backbone must be a resnet3d architecture");
  anchors.validate();
  match.validate();
  if (!(focal_alpha > 0 && focal_alpha < 1)) throw std::invalid_argument("detector.focal_alpha must lie in (0,1)");
  if (!(focal_gamma >= 0)) throw std::invalid_argument("detector.focal_gamma must be >= 0");
}

Detector::Detector(const DetectorConfig& cfg, double resample_factor, uint64_t seed)
    : cfg_(cfg),
      resample_factor_(resample_factor),
      init_rng_(seed) {
  cfg_.validate();
  if (!(resample_factor > 0 && resample_factor <= 1)) throw std::invalid_argument("resample_factor must lie in (0,1]");
  backbone_ = std::make_unique<models::Backbone<float>>(cfg_.backbone, init_rng_);
  fpn_ = std::make_unique<models::Fpn<float>>(backbone_->channels(), cfg_.backbone.fpn_channels, init_rng_);
  add_child("backbone", backbone_.get());
  add_child("fpn", fpn_.get());
}

std::array<Tensor<float>, 4> Detector::features(const Tensor<float>& x) { return fpn_->forward(backbone_->forward(x)); }

std::array<std::vector<Box3>, 4> Detector::level_anchors(const std::array<Tensor<float>, 4>& feats) const {
  std::array<std::vector<Box3>, 4> out;
  for (int l = 0; l < 4; ++l) {
    for (const auto& a : generate_anchors(l + 1, spatial(feats[l]), cfg_.anchors)) out[l].push_back(a.corners());
  }
  return out;
}

// RetinaNet -------------------------------------------------------------------

// RetinaNet -------------------------------------------------------------------

RetinaNet3d::RetinaNet3d(const DetectorConfig& cfg, double resample_factor, uint64_t seed)
    : Detector(cfg, resample_factor, seed) {
  if (cfg.family != "retinanet3d") throw std::invalid_argument("RetinaNet3d built from a " + cfg.family + " config");
  const int64_t c = cfg.backbone.fpn_channels, k = cfg_.anchors.per_voxel();
  for (int64_t i = 0; i < kHeadConvs; ++i) {
    cls_tower_.push_back(conv(c, c, 3, init_rng_));
    box_tower_.push_back(conv(c, c, 3, init_rng_));
    add_child("cls_tower" + std::to_string(i), cls_tower_.back().get());
    add_child("box_tower" + std::to_string(i), box_tower_.back().get());
  }
  cls_out_ = conv(c, k, 3, init_rng_, 0.01);
  box_out_ = conv(c, 6 * k, 3, init_rng_, 0.01);
  // start every anchor at the foreground prior so early focal loss is not
  // swamped by the easy background
  for (auto& b : cls_out_->bias.values()) b = static_cast<float>(-std::log((1 - kPriorProbability) / kPriorProbability));
  add_child("cls_out", cls_out_.get());
  add_child("box_out", box_out_.get());
}

std::array<RetinaNet3d::LevelOutput, 4> RetinaNet3d::heads(const std::array<Tensor<float>, 4>& feats) {
  std::array<LevelOutput, 4> out;
  for (int l = 0; l < 4; ++l) {
    Tensor<float> c = feats[l], b = feats[l];
    for (int64_t i = 0; i < kHeadConvs; ++i) {
      c = nn::relu(cls_tower_[i]->forward(c));
      b = nn::relu(box_tower_[i]->forward(b));
    }
    out[l] = {cls_out_->forward(c), box_out_->forward(b)};
  }
  return out;
}

std::array<RetinaNet3d::LevelOutput, 4> RetinaNet3d::head_outputs(const Tensor<float>& x) { return heads(features(x)); }

Tensor<float> RetinaNet3d::loss(const Tensor<float>& x, std::span<const Box3> gts, Rng&, LossStats* stats) {
  const auto feats = features(x);
  const auto anchors = level_anchors(feats);
  const auto all = flatten(anchors);
  if (all.empty()) throw std::invalid_argument("RetinaNet3d: no anchors for input " + nn::shape_string(x.shape()));
  const auto assign = match_anchors(all, gts, cfg_.match);
  const auto out = heads(feats);
  Tensor<float> cls, box;
  int64_t positives = 0;
  size_t offset = 0;
  for (int l = 0; l < 4; ++l) {
    const int64_t dhw = out[l].cls.dim(2) * out[l].cls.dim(3) * out[l].cls.dim(4);
    const HeadTargets h = head_targets(assign, offset, anchors[l], gts, dhw);
    offset += anchors[l].size();
    positives += h.positives;
    cls = accumulate(cls, nn::sigmoid_focal_with_logits<float>(out[l].cls, h.y, h.cls_w, cfg_.focal_alpha,
                                                               cfg_.focal_gamma));
    box = accumulate(box, nn::smooth_l1_sum<float>(out[l].box, h.t, h.box_w, kSmoothL1Beta));
  }
  const double norm = 1.0 / double(std::max<int64_t>(1, positives));
  cls = nn::scale(cls, norm);
  box = nn::scale(box, norm);
  if (stats) {
    stats->cls = cls.item();
    stats->box = box.item();
    stats->positives = positives;
  }
  return nn::add(cls, box);
}

std::vector<ScoredBox> RetinaNet3d::predict(const Tensor<float>& x, double nms_iou) {
  nn::NoGradGuard no_grad;
  const auto feats = features(x);
  const auto anchors = level_anchors(feats);
  const auto out = heads(feats);
  const Dims3 input = spatial(x);
  std::vector<ScoredBox> boxes;
  for (int l = 0; l < 4; ++l) collect_level(out[l].cls, out[l].box, anchors[l], input, kScorePrefilter, kTopPerLevel, boxes, nullptr);
  return nms_scored(boxes, nms_iou, boxes.size());
}

// Faster R-CNN ----------------------------------------------------------------

FasterRcnn3d::FasterRcnn3d(const DetectorConfig& cfg, double resample_factor, uint64_t seed)
    : Detector(cfg, resample_factor, seed) {
  if (cfg.family != "fasterrcnn3d") throw std::invalid_argument("FasterRcnn3d built from a " + cfg.family + " config");
  const int64_t c = cfg.backbone.fpn_channels, k = cfg_.anchors.per_voxel();
  rpn_conv_ = conv(c, c, 3, init_rng_);
  rpn_cls_ = conv(c, k, 1, init_rng_, 0.01);
  rpn_box_ = conv(c, 6 * k, 1, init_rng_, 0.01);
  add_child("rpn_conv", rpn_conv_.get());
  add_child("rpn_cls", rpn_cls_.get());
  add_child("rpn_box", rpn_box_.get());
  const int64_t pooled = c * kRoiOut[0] * kRoiOut[1] * kRoiOut[2];
  fc1_ = std::make_unique<Linear<float>>(pooled, kRoiHidden, init_rng_);
  fc2_ = std::make_unique<Linear<float>>(kRoiHidden, kRoiHidden, init_rng_);
  roi_cls_ = std::make_unique<Linear<float>>(kRoiHidden, 1, init_rng_);
  roi_box_ = std::make_unique<Linear<float>>(kRoiHidden, 6, init_rng_);
  init_normal(roi_cls_->weight, init_rng_, 0.01);
  init_normal(roi_box_->weight, init_rng_, 0.001);
  add_child("fc1", fc1_.get());
  add_child("fc2", fc2_.get());
  add_child("roi_cls", roi_cls_.get());
  add_child("roi_box", roi_box_.get());
}

std::array<FasterRcnn3d::RpnOutput, 4> FasterRcnn3d::rpn(const std::array<Tensor<float>, 4>& feats) {
  std::array<RpnOutput, 4> out;
  for (int l = 0; l < 4; ++l) {
    const Tensor<float> h = nn::relu(rpn_conv_->forward(feats[l]));
    out[l] = {rpn_cls_->forward(h), rpn_box_->forward(h)};
  }
  return out;
}

FasterRcnn3d::Proposals FasterRcnn3d::proposals_from(const std::array<RpnOutput, 4>& out,
                                                     const std::array<std::vector<Box3>, 4>& anchors,
                                                     const Dims3& input, size_t pre_nms_per_level) {
  std::vector<ScoredBox> boxes;
  int64_t discarded = 0;
  for (int l = 0; l < 4; ++l) {
    collect_level(out[l].cls, out[l].box, anchors[l], input, 0.0, pre_nms_per_level, boxes, &discarded);
  }
  Proposals p;
  p.discarded = discarded;
  for (const auto& b : nms_scored(boxes, cfg_.match.rpn_nms_iou, size_t(cfg_.match.proposals_per_volume))) {
    p.boxes.push_back(b.box);
    p.scores.push_back(b.score);
  }
  return p;
}

FasterRcnn3d::Proposals FasterRcnn3d::propose(const Tensor<float>& x) {
  nn::NoGradGuard no_grad;
  const auto feats = features(x);
  return proposals_from(rpn(feats), level_anchors(feats), spatial(x), kTopPerLevel);
}

int FasterRcnn3d::roi_level(const Box3& box) const {
  const double side = std::cbrt(std::max(box.volume(), 1e-12));
  const double l = 1.0 + std::floor(std::log2(side / cfg_.anchors.sizes[0]));
  return static_cast<int>(std::clamp(l, 1.0, 4.0));
}

std::pair<Tensor<float>, Tensor<float>> FasterRcnn3d::roi_head(const std::array<Tensor<float>, 4>& feats,
                                                               const std::vector<Box3>& boxes,
                                                               std::vector<size_t>& order) {
  std::array<std::vector<size_t>, 4> by_level;
  for (size_t i = 0; i < boxes.size(); ++i) by_level[roi_level(boxes[i]) - 1].push_back(i);
  std::vector<Tensor<float>> cls_parts, box_parts;
  order.clear();
  for (int l = 0; l < 4; ++l) {
    if (by_level[l].empty()) continue;
    const auto stride = double(cfg_.anchors.strides[l]);
    const Dims3 f = spatial(feats[l]);
    std::vector<nn::Region> regions;
    for (size_t i : by_level[l]) {
      std::array<int64_t, 6> r;
      for (int a = 0; a < 3; ++a) {
        const int64_t lo = std::clamp<int64_t>(int64_t(std::floor(boxes[i].lo(a) / stride)), 0, f[a] - 1);
        const int64_t hi = std::clamp<int64_t>(int64_t(std::ceil(boxes[i].hi(a) / stride)), lo + 1, f[a]);
        r[a] = lo;
        r[a + 3] = hi;
      }
      regions.push_back({r});
      order.push_back(i);
    }
    const auto n = static_cast<int64_t>(regions.size());
    Tensor<float> h = nn::roi_pool3d(feats[l], regions, kRoiOut);
    h = nn::reshape(h, {n, h.numel() / n});
    h = nn::relu(fc1_->forward(h));
    h = nn::relu(fc2_->forward(h));
    cls_parts.push_back(nn::reshape(roi_cls_->forward(h), {1, n}));
    box_parts.push_back(nn::reshape(roi_box_->forward(h), {1, n * 6}));
  }
  const auto r = static_cast<int64_t>(boxes.size());
  return {nn::reshape(nn::concat(cls_parts), {r, 1}), nn::reshape(nn::concat(box_parts), {r, 6})};
}

Tensor<float> FasterRcnn3d::loss(const Tensor<float>& x, std::span<const Box3> gts, Rng& rng, LossStats* stats) {
  const auto feats = features(x);
  const auto anchors = level_anchors(feats);
  const auto all = flatten(anchors);
  if (all.empty()) throw std::invalid_argument("FasterRcnn3d: no anchors for input " + nn::shape_string(x.shape()));
  const auto out = rpn(feats);

  // stage one: sampled anchors
  auto assign = match_anchors(all, gts, cfg_.match);
  subsample(assign, kRpnBatch, kRpnPositiveFraction, rng);
  int64_t sampled = 0, rpn_pos = 0;
  for (int64_t a : assign) {
    sampled += a != kIgnore;
    rpn_pos += a >= 0;
  }
  Tensor<float> rpn_cls, rpn_box;
  size_t offset = 0;
  for (int l = 0; l < 4; ++l) {
    const int64_t dhw = out[l].cls.dim(2) * out[l].cls.dim(3) * out[l].cls.dim(4);
    const HeadTargets h = head_targets(assign, offset, anchors[l], gts, dhw);
    offset += anchors[l].size();
    rpn_cls = accumulate(rpn_cls, nn::bce_with_logits<float>(out[l].cls, h.y, h.cls_w));
    rpn_box = accumulate(rpn_box, nn::smooth_l1_sum<float>(out[l].box, h.t, h.box_w, kSmoothL1Beta));
  }
  const double rpn_norm = 1.0 / double(std::max<int64_t>(1, sampled));
  rpn_cls = nn::scale(rpn_cls, rpn_norm);
  rpn_box = nn::scale(rpn_box, rpn_norm);

  // stage two: proposals from the current RPN plus the ground truth itself
  Proposals props;
  {
    nn::NoGradGuard no_grad;
    props = proposals_from(out, anchors, spatial(x), kTopPerLevel);
  }
  std::vector<Box3> rois = props.boxes;
  rois.insert(rois.end(), gts.begin(), gts.end());
  MatchConfig roi_match = cfg_.match;
  roi_match.force_best_match = false;
  auto roi_assign = match_anchors(rois, gts, roi_match);
  subsample(roi_assign, kRoiBatch, kRoiPositiveFraction, rng);
  std::vector<Box3> picked;
  std::vector<int64_t> picked_gt;
  for (size_t i = 0; i < rois.size(); ++i) {
    if (roi_assign[i] == kIgnore) continue;
    picked.push_back(rois[i]);
    picked_gt.push_back(roi_assign[i]);
  }
  Tensor<float> total = nn::add(rpn_cls, rpn_box);
  int64_t roi_pos = 0;
  double roi_cls_v = 0, roi_box_v = 0;
  if (!picked.empty()) {
    std::vector<size_t> order;
    auto [logits, deltas] = roi_head(feats, picked, order);
    std::vector<float> y(order.size(), 0.f), w(order.size(), 1.f), t(order.size() * 6, 0.f), bw(order.size() * 6, 0.f);
    for (size_t r = 0; r < order.size(); ++r) {
      const int64_t g = picked_gt[order[r]];
      if (g < 0) continue;
      ++roi_pos;
      y[r] = 1.f;
      const Deltas d = encode(gts[size_t(g)], picked[order[r]]);
      for (int j = 0; j < 6; ++j) {
        t[r * 6 + j] = static_cast<float>(d[j]);
        bw[r * 6 + j] = 1.f;
      }
    }
    const double roi_norm = 1.0 / double(order.size());
    const Tensor<float> rc = nn::scale(nn::bce_with_logits<float>(logits, y, w), roi_norm);
    const Tensor<float> rb = nn::scale(nn::smooth_l1_sum<float>(deltas, t, bw, kSmoothL1Beta), roi_norm);
    roi_cls_v = rc.item();
    roi_box_v = rb.item();
    total = nn::add(total, nn::add(rc, rb));
  }
  if (stats) {
    stats->rpn_cls = rpn_cls.item();
    stats->rpn_box = rpn_box.item();
    stats->cls = roi_cls_v;
    stats->box = roi_box_v;
    stats->positives = rpn_pos + roi_pos;
    stats->discarded_proposals = props.discarded;
  }
  return total;
}

std::vector<ScoredBox> FasterRcnn3d::predict(const Tensor<float>& x, double nms_iou) {
  nn::NoGradGuard no_grad;
  const auto feats = features(x);
  const Dims3 input = spatial(x);
  const Proposals props = proposals_from(rpn(feats), level_anchors(feats), input, kTopPerLevel);
  if (props.boxes.empty()) return {};
  std::vector<size_t> order;
  const auto [logits, deltas] = roi_head(feats, props.boxes, order);
  std::vector<ScoredBox> boxes;
  for (size_t r = 0; r < order.size(); ++r) {
    const double score = sigmoid(logits.data()[r]);
    if (score < kScorePrefilter) continue;
    Deltas d;
    for (int j = 0; j < 6; ++j) d[j] = deltas.data()[r * 6 + j];
    const Box3 b = clip_box(decode(d, props.boxes[order[r]]), input);
    if (has_volume(b)) boxes.push_back({b, score});
  }
  return nms_scored(boxes, nms_iou, boxes.size());
}

std::unique_ptr<Detector> make_detector(const DetectorConfig& cfg, double resample_factor, uint64_t seed) {
  if (cfg.family == "retinanet3d") return std::make_unique<RetinaNet3d>(cfg, resample_factor, seed);
  if (cfg.family == "fasterrcnn3d") return std::make_unique<FasterRcnn3d>(cfg, resample_factor, seed);
  throw std::invalid_argument("unknown detector family \"" + cfg.family + "\"");
}

// Pipeline ----------------------------------------------------------------------

std::vector<Detection> detect(Detector& model, const Volume& v, const preprocess::PreprocessConfig& pre,
                              double nms_iou, double score_threshold) {
  const Volume r = preprocess::resample_volume(v, pre.resample_factor);
  for (int a = 0; a < 3; ++a) {
    if (r.dims()[a] < kMinDetectExtent) {
      throw std::invalid_argument("detect: volume " + to_string(v.dims()) + " resamples to " + to_string(r.dims()) +
                                  ", below the minimum of " + std::to_string(kMinDetectExtent) + " voxels per axis");
    }
  }
  const auto scale = preprocess::resample_scale(v.dims(), r.dims(), pre.resample_factor);
  const bool was_training = model.training();
  model.set_training(false);
  const auto boxes = model.predict(models::volume_tensor<float>(r), nms_iou);
  model.set_training(was_training);
  std::vector<Detection> out;
  for (const auto& b : boxes) {
    if (b.score < score_threshold) continue;
    const Box3 o{b.box.z0 * scale.z, b.box.y0 * scale.y, b.box.x0 * scale.x,
                 b.box.z1 * scale.z, b.box.y1 * scale.y, b.box.x1 * scale.x};
    const Box3 c = clip_box(o, v.dims());
    if (has_volume(c)) out.push_back({v.id(), c, model.config().label, b.score});
  }
  return out;
}

DetSample prepare_sample(const Volume& v, std::span<const Box3> boxes, double resample_factor) {
  const Volume r = preprocess::resample_volume(v, resample_factor);
  const auto s = preprocess::resample_scale(v.dims(), r.dims(), resample_factor);
  DetSample out{v.id(), models::volume_tensor<float>(r), {}};
  for (const auto& b : boxes) {
    out.gts.push_back({b.z0 / s.z, b.y0 / s.y, b.x0 / s.x, b.z1 / s.z, b.y1 / s.y, b.x1 / s.x});
  }
  return out;
}

DetSample flip_sample(const DetSample& s, std::array<bool, 3> flip, bool transpose_yx) {
  const int64_t d = s.x.dim(2), h = s.x.dim(3), w = s.x.dim(4);
  const int64_t oh = transpose_yx ? w : h, ow = transpose_yx ? h : w;
  std::vector<float> dst(size_t(d * oh * ow));
  const float* src = s.x.data();
  for (int64_t z = 0; z < d; ++z)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const int64_t fz = flip[0] ? d - 1 - z : z, fy = flip[1] ? h - 1 - y : y, fx = flip[2] ? w - 1 - x : x;
        const int64_t ty = transpose_yx ? fx : fy, tx = transpose_yx ? fy : fx;
        dst[size_t((fz * oh + ty) * ow + tx)] = src[(z * h + y) * w + x];
      }
  DetSample out{s.id, Tensor<float>({1, 1, d, oh, ow}, std::move(dst)), {}};
  const auto mirror = [](double lo, double hi, double n, bool f) { return f ? std::pair{n - hi, n - lo} : std::pair{lo, hi}; };
  for (const auto& b : s.gts) {
    const auto [z0, z1] = mirror(b.z0, b.z1, double(d), flip[0]);
    const auto [y0, y1] = mirror(b.y0, b.y1, double(h), flip[1]);
    const auto [x0, x1] = mirror(b.x0, b.x1, double(w), flip[2]);
    out.gts.push_back(transpose_yx ? Box3{z0, x0, y0, z1, x1, y1} : Box3{z0, y0, x0, z1, y1, x1});
  }
  return out;
}

void train_detector(Detector& model, std::span<const DetSample> data, const nn::TrainConfig& tc, uint64_t seed,
                    const StepCallback& on_step) {
  tc.validate();
  if (data.empty()) throw std::invalid_argument("train_detector: empty training set");
  model.set_training(true);
  auto params = model.parameters();
  nn::AdamState<float> adam;
  Rng rng(seed);
  Rng order_rng = rng.split("order"), loss_rng = rng.split("sampling"), augment_rng = rng.split("augment");
  const bool augment = model.config().augment;
  std::vector<size_t> order;
  size_t cursor = 0;
  const int64_t steps = tc.total_steps(static_cast<int64_t>(data.size()));
  for (int64_t step = 0; step < steps; ++step) {
    nn::zero_grad<float>(params);
    double step_loss = 0.0;
    LossStats last;
    for (int64_t b = 0; b < tc.batch_size; ++b) {
      if (cursor == order.size()) {
        order.resize(data.size());
        std::iota(order.begin(), order.end(), 0);
        for (size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[size_t(order_rng.uniform_int(0, int64_t(i) - 1))]);
        }
        cursor = 0;
      }
      const DetSample& drawn = data[order[cursor++]];
      DetSample flipped;
      if (augment) {
        const uint64_t bits = augment_rng.next_u64();
        flipped = flip_sample(drawn, {bool(bits & 1), bool(bits & 2), bool(bits & 4)}, bool(bits & 8));
      }
      const DetSample& s = augment ? flipped : drawn;
      const Tensor<float> l = nn::scale(model.loss(s.x, s.gts, loss_rng, &last), 1.0 / double(tc.batch_size));
      step_loss += l.item();
      l.backward();
    }
    nn::adam_step<float>(params, adam, tc, tc.learning_rate_at(step, steps));
    if (on_step) on_step(step, step_loss, last);
  }
  model.set_training(false);
}

LatencyStats latency_stats(std::vector<double> samples) {
  LatencyStats s;
  s.n = static_cast<int64_t>(samples.size());
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  s.mean_s = std::accumulate(samples.begin(), samples.end(), 0.0) / double(samples.size());
  const size_t n = samples.size();
  s.median_s = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  // nearest-rank percentile
  s.p95_s = samples[static_cast<size_t>(std::ceil(0.95 * double(n))) - 1];
  return s;
}

LatencyStats bench_inference(Detector& model, std::span<const Volume> volumes, const preprocess::PreprocessConfig& pre,
                             const eval::EvalConfig& ev) {
  std::vector<double> samples;
  for (const auto& v : volumes) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)detect(model, v, pre, ev);
    samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return latency_stats(std::move(samples));
}

}  // namespace voxscreen::detect
