#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "voxscreen/detectors.hpp"

using namespace voxscreen;
using namespace voxscreen::detect;

namespace {

DetectorConfig small_config(const std::string& family) {
  DetectorConfig cfg;
  cfg.family = family;
  cfg.backbone.base_channels = 8;
  cfg.backbone.fpn_channels = 16;
  cfg.anchors.scale_multipliers = AnchorConfig::multipliers_for(family);
  return cfg;
}

/// 64^3 volume with one bright 30x36x18 block on a dim background; 10x12x6
/// after resampling by 1/3, so the smallest default anchors fit it.
Volume block_volume(Box3& box) {
  box = {15, 12, 27, 45, 48, 45};
  Volume v({64, 64, 64}, 0.1f, "toy");
  for (int64_t z = 15; z < 45; ++z)
    for (int64_t y = 12; y < 48; ++y)
      for (int64_t x = 27; x < 45; ++x) v.at(z, y, x) = 0.9f;
  return v;
}

}  // namespace

TEST_CASE("match: exact anchor is positive") {
  std::vector<Box3> anchors{{0, 0, 0, 4, 4, 4}, {10, 10, 10, 14, 14, 14}, {0, 0, 0, 40, 40, 40}};
  std::vector<Box3> gts{{10, 10, 10, 14, 14, 14}};
  const auto a = match_anchors(anchors, gts, MatchConfig{});
  CHECK(a[0] == kNegative);
  CHECK(a[1] == 0);
  CHECK(a[2] == kNegative);
  CHECK(match_anchors(anchors, std::vector<Box3>{}, MatchConfig{}) == std::vector<int64_t>(3, kNegative));
}

TEST_CASE("match: disjoint gt forces the first anchor") {
  std::vector<Box3> anchors{{0, 0, 0, 4, 4, 4}, {10, 10, 10, 14, 14, 14}};
  std::vector<Box3> gts{{50, 50, 50, 52, 52, 52}};
  auto a = match_anchors(anchors, gts, MatchConfig{});
  CHECK(a[0] == 0);
  CHECK(a[1] == kNegative);
  MatchConfig off;
  off.force_best_match = false;
  a = match_anchors(anchors, gts, off);
  CHECK(a[0] == kNegative);
}

TEST_CASE("match: IoU 0.30 falls in the ignore band") {
  // 10x10x3 against 10x10x10 sharing a corner: 300 / 1000
  const Box3 anchor{0, 0, 0, 10, 10, 10}, gt{0, 0, 0, 10, 10, 3};
  REQUIRE(oracle::raster_iou(anchor, gt) == doctest::Approx(0.30).epsilon(1e-12));
  std::vector<Box3> anchors{anchor, {0, 0, 0, 10, 10, 10}};
  MatchConfig cfg;
  cfg.force_best_match = false;
  const auto a = match_anchors(anchors, std::vector<Box3>{gt}, cfg);
  CHECK(a[0] == kIgnore);
}

TEST_CASE("match: every gt gets a positive under forced matching") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Box3> anchors, gts;
    for (int i = 0; i < 40; ++i) {
      const double z = rng.uniform(0, 40), y = rng.uniform(0, 40), x = rng.uniform(0, 40);
      anchors.push_back({z, y, x, z + rng.uniform(1, 10), y + rng.uniform(1, 10), x + rng.uniform(1, 10)});
    }
    for (int i = 0; i < 3; ++i) {
      const double z = rng.uniform(0, 40), y = rng.uniform(0, 40), x = rng.uniform(0, 40);
      gts.push_back({z, y, x, z + rng.uniform(1, 10), y + rng.uniform(1, 10), x + rng.uniform(1, 10)});
    }
    const auto a = match_anchors(anchors, gts, MatchConfig{});
    for (int64_t g = 0; g < 3; ++g) CHECK(std::count(a.begin(), a.end(), g) >= 1);
  }
}

TEST_CASE("match config validation") {
  MatchConfig cfg;
  cfg.neg_iou = 0.5;
  CHECK_THROWS(cfg.validate());
  cfg = MatchConfig{};
  cfg.pos_iou = 1.0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("retinanet head output counts") {
  RetinaNet3d model(small_config("retinanet3d"), 1.0 / 3.0, 1);
  nn::NoGradGuard no_grad;
  model.set_training(false);
  const auto out = model.head_outputs(nn::Tensor<float>({1, 1, 22, 20, 18}));
  for (const auto& lvl : out) {
    const int64_t dhw = lvl.cls.dim(2) * lvl.cls.dim(3) * lvl.cls.dim(4);
    CHECK(lvl.cls.numel() == dhw * 9);
    CHECK(lvl.box.numel() == dhw * 9 * 6);
  }
  CHECK(out[0].cls.dim(2) == 6);
  CHECK(out[3].cls.dim(2) == 1);
}

TEST_CASE("retinanet loss is finite and positive at init") {
  RetinaNet3d model(small_config("retinanet3d"), 1.0 / 3.0, 2);
  Box3 box;
  const Volume v = block_volume(box);
  const DetSample s = prepare_sample(v, std::vector<Box3>{box}, 1.0 / 3.0);
  Rng rng(0);
  LossStats stats;
  const double l = model.loss(s.x, s.gts, rng, &stats).item();
  CHECK(std::isfinite(l));
  CHECK(l > 0);
  CHECK(stats.positives >= 1);
}

TEST_CASE("retinanet overfits a single volume") {
  RetinaNet3d model(small_config("retinanet3d"), 1.0 / 3.0, 3);
  Box3 box;
  const Volume v = block_volume(box);
  const DetSample s = prepare_sample(v, std::vector<Box3>{box}, 1.0 / 3.0);
  nn::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.max_iterations = 50;
  std::vector<double> losses;
  train_detector(model, std::span<const DetSample>(&s, 1), tc, 0,
                 [&](int64_t, double loss, const LossStats&) { losses.push_back(loss); });
  REQUIRE(losses.size() == 50);
  MESSAGE("initial " << losses.front() << " final " << losses.back());
  CHECK(losses.back() < 0.1 * losses.front());
}

TEST_CASE("faster r-cnn shapes and proposals") {
  FasterRcnn3d model(small_config("fasterrcnn3d"), 1.0 / 3.0, 4);
  CHECK(model.anchors().per_voxel() == 3);
  Box3 box;
  const Volume v = block_volume(box);
  const DetSample s = prepare_sample(v, std::vector<Box3>{box}, 1.0 / 3.0);
  model.set_training(false);
  const auto props = model.propose(s.x);
  CHECK(props.boxes.size() <= 128);
  CHECK(!props.boxes.empty());
  for (const auto& b : props.boxes) {
    CHECK(b.valid());
    CHECK(b.z0 >= 0);
    CHECK(b.z1 <= 22);
  }
  // level routing by proposal size, relative to the smallest anchor
  const double a1 = model.anchors().sizes[0];
  CHECK(model.roi_level(BoxCenterSize{5, 5, 5, a1, a1, a1}.corners()) == 1);
  CHECK(model.roi_level(BoxCenterSize{5, 5, 5, 2 * a1, 2 * a1, 2 * a1}.corners()) == 2);
  CHECK(model.roi_level(BoxCenterSize{5, 5, 5, 100, 100, 100}.corners()) == 4);
  CHECK(model.roi_level(BoxCenterSize{5, 5, 5, 0.1, 0.1, 0.1}.corners()) == 1);

  model.set_training(true);
  Rng rng(1);
  LossStats stats;
  const double l = model.loss(s.x, s.gts, rng, &stats).item();
  CHECK(std::isfinite(l));
  CHECK(l > 0);
  CHECK(stats.positives >= 2);
}

TEST_CASE("roi pooling has a fixed output size") {
  nn::Tensor<float> feat({1, 16, 6, 5, 4});
  const auto pooled = nn::roi_pool3d(feat, {{{0, 0, 0, 1, 1, 1}}, {{0, 0, 0, 6, 5, 4}}}, FasterRcnn3d::kRoiOut);
  CHECK(pooled.shape() == nn::Shape{2, 16, 2, 2, 2});
}

TEST_CASE("faster r-cnn loss decreases on a single volume") {
  FasterRcnn3d model(small_config("fasterrcnn3d"), 1.0 / 3.0, 5);
  Box3 box;
  const Volume v = block_volume(box);
  const DetSample s = prepare_sample(v, std::vector<Box3>{box}, 1.0 / 3.0);
  nn::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.max_iterations = 40;
  std::vector<double> losses;
  train_detector(model, std::span<const DetSample>(&s, 1), tc, 0,
                 [&](int64_t, double loss, const LossStats&) { losses.push_back(loss); });
  MESSAGE("initial " << losses.front() << " final " << losses.back());
  CHECK(losses.back() < 0.5 * losses.front());
}

TEST_CASE("detect clips to the volume and is repeatable") {
  RetinaNet3d model(small_config("retinanet3d"), 1.0 / 3.0, 6);
  Box3 box;
  const Volume v = block_volume(box);
  preprocess::PreprocessConfig pre;
  const auto a = detect::detect(model, v, pre, 0.3, 0.0);
  const auto b = detect::detect(model, v, pre, 0.3, 0.0);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].box == b[i].box);
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].box.z0 >= 0);
    CHECK(a[i].box.z1 <= 64);
    CHECK(a[i].box.x1 <= 64);
    CHECK(a[i].volume_id == "toy");
  }
  CHECK_THROWS_AS(detect::detect(model, Volume({20, 64, 64}), pre, 0.3, 0.0), std::invalid_argument);
}

TEST_CASE("prepare_sample maps boxes into the resampled frame") {
  Box3 box;
  const Volume v = block_volume(box);
  const DetSample s = prepare_sample(v, std::vector<Box3>{box}, 1.0 / 3.0);
  CHECK(s.x.shape() == nn::Shape{1, 1, 22, 22, 22});
  CHECK(s.gts[0].z0 == doctest::Approx(5.0));
  CHECK(s.gts[0].y1 == doctest::Approx(16.0));
  CHECK(s.gts[0].x1 == doctest::Approx(15.0));
}

TEST_CASE("latency statistics") {
  const auto s = latency_stats(std::vector<double>(10, 0.25));
  CHECK(s.n == 10);
  CHECK(s.mean_s == doctest::Approx(0.25));
  const auto t = latency_stats({0.1, 0.2, 0.3, 0.4});
  CHECK(t.median_s == doctest::Approx(0.25));
  CHECK(t.p95_s == 0.4);
  CHECK(t.mean_s >= 0.1);
  CHECK(t.mean_s <= 0.4);
  const auto j = t.to_json();
  for (const char* key : {"mean_s", "median_s", "p95_s", "n"}) CHECK(j.contains(key));
}

TEST_CASE("flip_sample moves boxes with their contents") {
  Rng rng(21);
  DetSample s{"v", Tensor<float>({1, 1, 6, 7, 9}), {{1, 2, 0, 4, 5, 3}, {0, 0, 5, 6, 2, 9}}};
  for (auto& v : s.x.values()) v = float(rng.uniform());
  const auto mass = [](const DetSample& d, const Box3& b) {
    double m = 0;
    const int64_t h = d.x.dim(3), w = d.x.dim(4);
    for (int64_t z = int64_t(b.z0); z < int64_t(b.z1); ++z)
      for (int64_t y = int64_t(b.y0); y < int64_t(b.y1); ++y)
        for (int64_t x = int64_t(b.x0); x < int64_t(b.x1); ++x) m += d.x.data()[(z * h + y) * w + x];
    return m;
  };
  for (int bits = 0; bits < 16; ++bits) {
    CAPTURE(bits);
    const std::array<bool, 3> flip{bool(bits & 1), bool(bits & 2), bool(bits & 4)};
    const bool transpose = bits & 8;
    const DetSample f = flip_sample(s, flip, transpose);
    CHECK(f.x.dim(3) == (transpose ? 9 : 7));
    CHECK(f.x.dim(4) == (transpose ? 7 : 9));
    REQUIRE(f.gts.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
      CHECK(f.gts[i].volume() == s.gts[i].volume());
      CHECK(mass(f, f.gts[i]) == doctest::Approx(mass(s, s.gts[i])).epsilon(1e-12));
    }
    if (!transpose) {
      // flips are involutions
      const DetSample back = flip_sample(f, flip, false);
      CHECK(std::equal(back.x.values().begin(), back.x.values().end(), s.x.values().begin()));
      CHECK(back.gts[0] == s.gts[0]);
    }
  }
}
