#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "voxscreen/eval.hpp"
#include "voxscreen/rng.hpp"

using namespace voxscreen;
using namespace voxscreen::eval;

namespace {

const Box3 kA{0, 0, 0, 4, 4, 4}, kB{10, 10, 10, 14, 14, 14}, kFar{30, 30, 30, 34, 34, 34};

Detection det(const Box3& b, double score, std::string vid = "v") { return {std::move(vid), b, "handgun", score}; }
GroundTruth gt(const Box3& b, std::string vid = "v") { return {std::move(vid), "handgun", b}; }

std::vector<int> labels_with(int pos, int neg) {
  std::vector<int> l(size_t(pos), 1);
  l.resize(size_t(pos + neg), 0);
  return l;
}

}  // namespace

TEST_CASE("kfold partitions every index exactly once") {
  const auto labels = labels_with(30, 70);
  const auto folds = kfold_split(labels, 10, 1);
  REQUIRE(folds.size() == 10);
  std::set<size_t> seen;
  for (const auto& f : folds) {
    CHECK(f.size() == 10);
    int pos = 0;
    for (size_t i : f) {
      CHECK(seen.insert(i).second);
      pos += labels[i];
    }
    CHECK(pos == 3);
  }
  CHECK(seen.size() == 100);
  CHECK(kfold_split(labels, 10, 1) == folds);
  CHECK(kfold_split(labels, 10, 2) != folds);
}

TEST_CASE("kfold stratification stays within one sample") {
  Rng rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const int pos = int(rng.uniform_int(10, 60)), neg = int(rng.uniform_int(10, 90));
    const int k = int(rng.uniform_int(2, 10));
    const auto folds = kfold_split(labels_with(pos, neg), k, uint64_t(trial));
    size_t lo = SIZE_MAX, hi = 0;
    for (const auto& f : folds) {
      const auto npos = size_t(std::count_if(f.begin(), f.end(), [&](size_t i) { return int(i) < pos; }));
      CHECK(std::abs(double(npos) - double(pos) / k) < 1.0);
      lo = std::min(lo, f.size());
      hi = std::max(hi, f.size());
    }
    CHECK(hi - lo <= 1);
  }
}

TEST_CASE("kfold rejects classes smaller than k") {
  CHECK_THROWS(kfold_split(labels_with(5, 50), 10, 0));
  CHECK_THROWS(kfold_split(labels_with(3, 3), 10, 0));
  CHECK_THROWS(kfold_split(labels_with(10, 10), 1, 0));
}

TEST_CASE("kfold train/test complement") {
  const auto folds = kfold_split(labels_with(20, 20), 4, 9);
  for (const auto& tt : kfold_train_test(folds)) {
    CHECK(tt.train.size() + tt.test.size() == 40);
    for (size_t i : tt.test) CHECK(!std::binary_search(tt.train.begin(), tt.train.end(), i));
  }
}

TEST_CASE("random splits are 80/20 and differ by repeat") {
  const auto splits = random_splits(200, 0.8, 3, 4);
  REQUIRE(splits.size() == 3);
  for (const auto& s : splits) {
    CHECK(s.train.size() == 160);
    CHECK(s.test.size() == 40);
  }
  CHECK(splits[0].test != splits[1].test);
  CHECK(random_splits(200, 0.8, 3, 4)[2].test == splits[2].test);
  CHECK_THROWS(random_splits(10, 1.0, 1, 0));
}

TEST_CASE("classification rates") {
  std::vector<double> scores{1, 1, 0, 0};
  std::vector<int> labels{1, 1, 0, 0};
  auto m = classification_metrics(scores, labels);
  CHECK(m.tpr == 100.0);
  CHECK(m.fpr == 0.0);
  scores = {0.9, 0.8, 0.7, 0.6};
  m = classification_metrics(scores, labels);
  CHECK(m.tpr == 100.0);
  CHECK(m.fpr == 100.0);

  // 8 of 10 positives and 2 of 90 negatives above threshold
  scores.assign(100, 0.1);
  labels = labels_with(10, 90);
  for (int i = 0; i < 8; ++i) scores[size_t(i)] = 0.9;
  scores[50] = scores[60] = 0.7;
  m = classification_metrics(scores, labels);
  CHECK(m.tpr == doctest::Approx(80.0));
  CHECK(m.fpr == doctest::Approx(200.0 / 90.0));

  std::vector<double> neg_scores{0.2, 0.7};
  std::vector<int> neg_labels{0, 0};
  m = classification_metrics(neg_scores, neg_labels);
  CHECK(std::isnan(m.tpr));
  CHECK(m.fpr == 50.0);
  CHECK(m.diagnostic.find("TPR undefined") != std::string::npos);
}

TEST_CASE("detection precision and recall") {
  EvalConfig cfg;
  std::vector<GroundTruth> one{gt(kA)};
  auto m = detection_pr(std::vector<Detection>{det(kA, 0.95)}, one, cfg);
  CHECK(m.precision == 100.0);
  CHECK(m.recall == 100.0);
  m = detection_pr(std::vector<Detection>{det(kFar, 0.95)}, one, cfg);
  CHECK(m.precision == 0.0);
  CHECK(m.recall == 0.0);

  // hit, duplicate of the same gt, miss
  std::vector<GroundTruth> two{gt(kA), gt(kB)};
  std::vector<Detection> dets{det(kA, 0.95), det(kA, 0.92), det(kFar, 0.91)};
  m = detection_pr(dets, two, cfg);
  CHECK(m.tp == 1);
  CHECK(m.precision == doctest::Approx(100.0 / 3.0));
  CHECK(m.recall == doctest::Approx(50.0));

  m = detection_pr(std::vector<Detection>{det(kA, 0.5)}, one, cfg);
  CHECK(std::isnan(m.precision));
  CHECK(!m.diagnostic.empty());
}

TEST_CASE("matches respect volume and label") {
  EvalConfig cfg;
  std::vector<GroundTruth> g{gt(kA, "other")};
  CHECK(detection_pr(std::vector<Detection>{det(kA, 0.95)}, g, cfg).tp == 0);
  Detection d = det(kA, 0.95, "other");
  d.label = "bottle";
  CHECK(detection_pr(std::vector<Detection>{d}, g, cfg).tp == 0);
}

TEST_CASE("average precision worked examples") {
  std::vector<GroundTruth> one{gt(kA)};
  CHECK(average_precision(std::vector<Detection>{det(kA, 0.4)}, one, 0.1) == 100.0);
  CHECK(average_precision(std::vector<Detection>{det(kFar, 0.4)}, one, 0.1) == 0.0);
  std::vector<GroundTruth> two{gt(kA), gt(kB)};
  std::vector<Detection> ranked{det(kA, 0.9), det(kFar, 0.8), det(kB, 0.7)};
  CHECK(average_precision(ranked, two, 0.1) == doctest::Approx(100.0 * (0.5 + 0.5 * 2.0 / 3.0)).epsilon(1e-12));
  CHECK_THROWS(average_precision(ranked, std::vector<GroundTruth>{}, 0.1));
}

TEST_CASE("average precision depends only on score ranks") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<GroundTruth> gts;
    std::vector<Detection> dets;
    for (int i = 0; i < 6; ++i) {
      const double o = 20.0 * i;
      gts.push_back(gt({o, 0, 0, o + 4, 4, 4}));
    }
    for (int i = 0; i < 12; ++i) {
      const double o = 20.0 * double(rng.uniform_int(0, 7)) + double(rng.uniform_int(0, 3));
      dets.push_back(det({o, 0, 0, o + 4, 4, 4}, rng.uniform()));
    }
    const double ap = average_precision(dets, gts, 0.1);
    CHECK(ap >= 0.0);
    CHECK(ap <= 100.0);
    auto warped = dets;
    for (auto& d : warped) d.score = std::pow(d.score, 3.0) * 0.5 + 0.1;
    CHECK(average_precision(warped, gts, 0.1) == doctest::Approx(ap).epsilon(1e-12));

    const auto curve = pr_curve(dets, gts, 0.1);
    for (size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].recall >= curve[i - 1].recall);

    // a detection_pr cut at a ranked score reproduces that curve point
    EvalConfig cfg;
    const size_t pick = size_t(rng.uniform_int(0, int64_t(curve.size()) - 1));
    cfg.score_threshold = std::clamp(curve[pick].score, 1e-9, 1.0 - 1e-9);
    bool tie = false;
    for (size_t i = 0; i < curve.size(); ++i) tie = tie || (i != pick && curve[i].score == curve[pick].score);
    if (tie || curve[pick].score != cfg.score_threshold) continue;
    size_t last = pick;
    while (last + 1 < curve.size() && curve[last + 1].score >= cfg.score_threshold) ++last;
    const auto m = detection_pr(dets, gts, cfg);
    CHECK(m.precision == doctest::Approx(100.0 * curve[last].precision));
    CHECK(m.recall == doctest::Approx(100.0 * curve[last].recall));
  }
}

TEST_CASE("aggregate mean and sample std") {
  std::vector<double> runs{80, 90, 100};
  const Summary s = aggregate(runs);
  CHECK(s.mean == 90.0);
  CHECK(s.std == doctest::Approx(10.0).epsilon(1e-14));
  CHECK(s.format() == "90.00 ± 10.00");
  std::vector<double> single{42.5};
  CHECK(aggregate(single).format() == "42.50 ± 0.00");
  std::vector<double> same{7, 7, 7};
  CHECK(aggregate(same).std == 0.0);
  CHECK_THROWS(aggregate(std::vector<double>{}));
}

TEST_CASE("table renders aligned columns") {
  const std::string t = render_table({"Model", "AP (%)"}, {{"RetinaNet", "90.00 ± 10.00"}, {"X", "1"}});
  CHECK(t == "Model      AP (%)\n"
             "------------------------\n"
             "RetinaNet  90.00 ± 10.00\n"
             "X          1\n");
}

TEST_CASE("eval config validation") {
  EvalConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.iou_threshold = 0.0;
  CHECK_THROWS(cfg.validate());
  SplitPlan plan;
  plan.k = 1;
  CHECK_THROWS(plan.validate());
}
