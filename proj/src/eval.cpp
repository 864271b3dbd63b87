#include "voxscreen/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "voxscreen/rng.hpp"

namespace voxscreen::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool open_unit(double v) { return v > 0.0 && v < 1.0; }

// Fisher-Yates driven by the counter-based generator.
void shuffle(std::vector<size_t>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<size_t> ranked(std::span<const Detection> dets) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

// Greedy matching along `order`; returns the true-positive flag per entry.
std::vector<bool> greedy_match(std::span<const Detection> dets, const std::vector<size_t>& order,
                               std::span<const GroundTruth> gts, double iou_threshold) {
  std::vector<bool> used(gts.size(), false), tp;
  tp.reserve(order.size());
  for (size_t i : order) {
    const Detection& d = dets[i];
    double best = -1.0;
    size_t best_j = gts.size();
    for (size_t j = 0; j < gts.size(); ++j) {
      if (used[j] || gts[j].volume_id != d.volume_id || gts[j].label != d.label) continue;
      const double iou = iou3d(d.box, gts[j].box);
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best_j < gts.size()) used[best_j] = true;
    tp.push_back(best_j < gts.size());
  }
  return tp;
}

}  // namespace

void EvalConfig::validate() const {
  if (!open_unit(iou_threshold)) throw std::invalid_argument("eval.iou_threshold must lie in (0,1)");
  if (!open_unit(score_threshold)) throw std::invalid_argument("eval.score_threshold must lie in (0,1)");
  if (!open_unit(nms_iou)) throw std::invalid_argument("eval.nms_iou must lie in (0,1)");
  if (!open_unit(classification_threshold)) {
    throw std::invalid_argument("eval.classification_threshold must lie in (0,1)");
  }
}

void SplitPlan::validate() const {
  if (mode == Mode::kfold && k < 2) throw std::invalid_argument("split.k must be >= 2");
  if (!open_unit(train_fraction)) throw std::invalid_argument("split.train_fraction must lie in (0,1)");
  if (n_repeats < 1) throw std::invalid_argument("split.n_repeats must be >= 1");
}

std::vector<std::vector<size_t>> kfold_split(std::span<const int> labels, int k, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
  if (static_cast<size_t>(k) > labels.size()) throw std::invalid_argument("kfold_split: k exceeds sample count");
  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  for (const auto* cls : {&pos, &neg}) {
    if (!cls->empty() && cls->size() < static_cast<size_t>(k)) {
      throw std::invalid_argument("kfold_split: a class has " + std::to_string(cls->size()) + " samples, fewer than k=" +
                                  std::to_string(k));
    }
  }
  Rng rng(seed);
  Rng rp = rng.split("positive"), rn = rng.split("negative");
  shuffle(pos, rp);
  shuffle(neg, rn);
  std::vector<std::vector<size_t>> folds(static_cast<size_t>(k));
  for (size_t i = 0; i < pos.size(); ++i) folds[i % k].push_back(pos[i]);
  // negatives continue the deal where positives stopped, which evens fold sizes
  const size_t offset = pos.size() % static_cast<size_t>(k);
  for (size_t i = 0; i < neg.size(); ++i) folds[(i + offset) % k].push_back(neg[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::vector<TrainTest> kfold_train_test(const std::vector<std::vector<size_t>>& folds) {
  std::vector<TrainTest> out;
  for (size_t i = 0; i < folds.size(); ++i) {
    TrainTest tt;
    tt.test = folds[i];
    for (size_t j = 0; j < folds.size(); ++j) {
      if (j != i) tt.train.insert(tt.train.end(), folds[j].begin(), folds[j].end());
    }
    std::sort(tt.train.begin(), tt.train.end());
    out.push_back(std::move(tt));
  }
  return out;
}

std::vector<TrainTest> random_splits(size_t n, double train_fraction, int repeats, uint64_t seed) {
  if (!open_unit(train_fraction)) throw std::invalid_argument("random_splits: train_fraction must lie in (0,1)");
  const auto n_train = static_cast<size_t>(std::llround(double(n) * train_fraction));
  if (n_train == 0 || n_train == n) throw std::invalid_argument("random_splits: too few samples for a split");
  std::vector<TrainTest> out;
  Rng rng(seed);
  for (int r = 0; r < repeats; ++r) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng sub = rng.split(static_cast<uint64_t>(r));
    shuffle(idx, sub);
    TrainTest tt;
    tt.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    tt.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(tt.train.begin(), tt.train.end());
    std::sort(tt.test.begin(), tt.test.end());
    out.push_back(std::move(tt));
  }
  return out;
}

ClassMetrics classification_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size()) throw std::invalid_argument("classification_metrics: size mismatch");
  ClassMetrics m;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i]) {
      (predicted ? m.tp : m.fn)++;
    } else {
      (predicted ? m.fp : m.tn)++;
    }
  }
  m.tpr = m.tp + m.fn > 0 ? 100.0 * double(m.tp) / double(m.tp + m.fn) : kNaN;
  m.fpr = m.fp + m.tn > 0 ? 100.0 * double(m.fp) / double(m.fp + m.tn) : kNaN;
  if (m.tp + m.fn == 0) m.diagnostic = "no positive samples: TPR undefined";
  if (m.fp + m.tn == 0) m.diagnostic += std::string(m.diagnostic.empty() ? "" : "; ") + "no negative samples: FPR undefined";
  return m;
}

PrMetrics detection_pr(std::span<const Detection> dets, std::span<const GroundTruth> gts, const EvalConfig& cfg) {
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    if (d.score >= cfg.score_threshold) kept.push_back(d);
  }
  const auto tp = greedy_match(kept, ranked(kept), gts, cfg.iou_threshold);
  PrMetrics m;
  m.kept = static_cast<int64_t>(kept.size());
  m.n_gt = static_cast<int64_t>(gts.size());
  m.tp = std::count(tp.begin(), tp.end(), true);
  m.precision = m.kept > 0 ? 100.0 * double(m.tp) / double(m.kept) : kNaN;
  m.recall = m.n_gt > 0 ? 100.0 * double(m.tp) / double(m.n_gt) : kNaN;
  if (m.kept == 0) m.diagnostic = "no detection at or above the score threshold: precision undefined";
  if (m.n_gt == 0) m.diagnostic += std::string(m.diagnostic.empty() ? "" : "; ") + "no ground truth: recall undefined";
  return m;
}

std::vector<PrPoint> pr_curve(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                              double iou_threshold) {
  const auto order = ranked(dets);
  const auto tp = greedy_match(dets, order, gts, iou_threshold);
  std::vector<PrPoint> curve;
  int64_t hits = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    hits += tp[i];
    curve.push_back({dets[order[i]].score, double(hits) / double(i + 1),
                     gts.empty() ? 0.0 : double(hits) / double(gts.size())});
  }
  return curve;
}

double average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_threshold) {
  if (gts.empty()) throw std::invalid_argument("average_precision: no ground-truth boxes");
  const auto curve = pr_curve(dets, gts, iou_threshold);
  // precision envelope: max precision at any later (higher-recall) rank
  std::vector<double> envelope(curve.size());
  double best = 0.0;
  for (size_t i = curve.size(); i-- > 0;) {
    best = std::max(best, curve[i].precision);
    envelope[i] = best;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < curve.size(); ++i) {
    if (curve[i].recall > prev_recall) {
      ap += (curve[i].recall - prev_recall) * envelope[i];
      prev_recall = curve[i].recall;
    }
  }
  return 100.0 * ap;
}

std::string Summary::format() const { return fmt::format("{:.2f} ± {:.2f}", mean, std); }

Summary aggregate(std::span<const double> runs) {
  Summary s;
  s.n = static_cast<int64_t>(runs.size());
  if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
  double sum = 0.0;
  for (double v : runs) sum += v;
  s.mean = sum / double(runs.size());
  if (runs.size() > 1) {
    double ss = 0.0;
    for (double v : runs) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / double(runs.size() - 1));
  }
  return s;
}

namespace {
// Display width in code points; the table holds "±".
size_t display_width(const std::string& s) {
  size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}
}  // namespace

std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> width(header.size(), 0);
  auto widen = [&](const std::vector<std::string>& row) {
    for (size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], display_width(row[c]));
  };
  widen(header);
  for (const auto& r : rows) widen(r);
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& row) {
    std::string line;
    for (size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < row.size() ? row[c] : "";
      line += cell + std::string(width[c] - display_width(cell), ' ');
      if (c + 1 < width.size()) line += "  ";
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << '\n';
  };
  emit(header);
  size_t total = 0;
  for (size_t w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) emit(r);
  return out.str();
}

}  // namespace voxscreen::eval
