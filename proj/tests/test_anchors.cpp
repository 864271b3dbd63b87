#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "voxscreen/anchors.hpp"
#include "voxscreen/rng.hpp"

using namespace voxscreen;
using namespace voxscreen::detect;

namespace {

AnchorConfig family(const std::string& name) {
  AnchorConfig cfg;
  cfg.scale_multipliers = AnchorConfig::multipliers_for(name);
  return cfg;
}

// extents stay within a 60x ratio, inside the decode clamp
Box3 random_box(Rng& rng) {
  BoxCenterSize c{rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-40, 40),
                  rng.uniform(1, 60), rng.uniform(1, 60), rng.uniform(1, 60)};
  return c.corners();
}

}  // namespace

TEST_CASE("anchors per voxel by detector family") {
  CHECK(family("retinanet3d").per_voxel() == 9);
  CHECK(family("fasterrcnn3d").per_voxel() == 3);
  CHECK_THROWS(AnchorConfig::multipliers_for("yolo"));

  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Dims3 f{rng.uniform_int(1, 9), rng.uniform_int(1, 9), rng.uniform_int(1, 9)};
    for (int level = 1; level <= 4; ++level) {
      CHECK(int64_t(generate_anchors(level, f, family("retinanet3d")).size()) == f.voxels() * 9);
      CHECK(int64_t(generate_anchors(level, f, family("fasterrcnn3d")).size()) == f.voxels() * 3);
    }
  }
  CHECK_THROWS(generate_anchors(0, {2, 2, 2}, AnchorConfig{}));
  CHECK_THROWS(generate_anchors(5, {2, 2, 2}, AnchorConfig{}));
}

TEST_CASE("ratio 1:2:sqrt2 at size 8") {
  AnchorConfig cfg;
  cfg.sizes = {8, 16, 32, 64};
  const auto a = generate_anchors(1, {1, 1, 1}, cfg);
  REQUIRE(a.size() == 3);
  // (h, w, d) = (8/sqrt2, 8*sqrt2, 8)
  CHECK(a[0].h == doctest::Approx(5.657).epsilon(1e-4));
  CHECK(a[0].w == doctest::Approx(11.314).epsilon(1e-4));
  CHECK(a[0].d == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(a[0].volume() == doctest::Approx(512.0).epsilon(1e-12));
  CHECK(a[1].d == doctest::Approx(8.0));
  CHECK(a[1].h == doctest::Approx(8.0));
  CHECK(a[1].w == doctest::Approx(8.0));
}

TEST_CASE("anchor volume equals a cubed for every ratio and multiplier") {
  const AnchorConfig cfg = family("retinanet3d");
  for (int level = 1; level <= 4; ++level) {
    const auto anchors = generate_anchors(level, {2, 3, 2}, cfg);
    const int64_t dhw = 12;
    for (size_t k = 0; k < 9; ++k) {
      const double m = cfg.scale_multipliers[k / 3];
      const double a = cfg.sizes[level - 1] * m;
      for (int64_t v = 0; v < dhw; ++v) {
        const double vol = anchors[k * dhw + v].volume();
        CHECK(std::abs(vol - a * a * a) <= 1e-6 * a * a * a);
      }
    }
  }
}

TEST_CASE("anchor centres follow the level stride") {
  const AnchorConfig cfg;
  const auto l1 = generate_anchors(1, {2, 2, 3}, cfg);
  CHECK(l1[0].cz == 2.0);
  CHECK(l1[0].cx == 2.0);
  CHECK(l1[2].cx == 10.0);  // voxel (0,0,2)
  CHECK(l1[3].cy == 6.0);   // voxel (0,1,0)
  // the same input extent holds 8x fewer anchor positions one level up
  const Dims3 input{32, 32, 32};
  for (int level = 1; level < 4; ++level) {
    const auto s0 = cfg.strides[level - 1], s1 = cfg.strides[level];
    CHECK(s1 == 2 * s0);
    const Dims3 f0{input.d / s0, input.h / s0, input.w / s0}, f1{input.d / s1, input.h / s1, input.w / s1};
    CHECK(generate_anchors(level, f0, cfg).size() == 8 * generate_anchors(level + 1, f1, cfg).size());
  }
}

TEST_CASE("anchor presets and validation") {
  CHECK(AnchorConfig::preset_names().size() == 4);
  for (const auto& name : AnchorConfig::preset_names()) {
    AnchorConfig cfg;
    cfg.sizes = AnchorConfig::preset_sizes(name);
    CHECK(cfg.sizes_label() == name);
    CHECK_NOTHROW(cfg.validate());
  }
  CHECK_THROWS(AnchorConfig::preset_sizes("1-2-3-4"));
  AnchorConfig bad;
  bad.sizes = {8, 8, 16, 32};
  CHECK_THROWS(bad.validate());
  bad = AnchorConfig{};
  bad.ratios = {{1, -1, 1}};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("encode worked example") {
  const Box3 anchor = BoxCenterSize{0, 0, 0, 8, 8, 8}.corners();
  const Box3 gt = BoxCenterSize{2, 0, 0, 16, 16, 16}.corners();
  const Deltas t = encode(gt, anchor);
  const Deltas want{0.25, 0, 0, std::log(2.0), std::log(2.0), std::log(2.0)};
  for (int j = 0; j < 6; ++j) CHECK(t[j] == doctest::Approx(want[j]).epsilon(1e-12));
  for (double v : encode(anchor, anchor)) CHECK(v == 0.0);
}

TEST_CASE("encode rejects non-positive extents") {
  const Box3 anchor{0, 0, 0, 4, 4, 4};
  CHECK_THROWS_AS(encode({0, 0, 0, 0, 2, 2}, anchor), GeometryError);
  CHECK_THROWS_AS(encode(anchor, {0, 0, 0, 4, 0, 4}), GeometryError);
}

TEST_CASE("decode inverts encode") {
  Rng rng(19);
  for (int i = 0; i < 1000; ++i) {
    const Box3 b = random_box(rng), a = random_box(rng);
    const auto want = b.to_array(), got = decode(encode(b, a), a).to_array();
    for (int j = 0; j < 6; ++j) CHECK(std::abs(got[j] - want[j]) <= 1e-5 * std::max(1.0, std::abs(want[j])));
  }
}

TEST_CASE("decode clamps extreme log deltas") {
  const Box3 anchor = BoxCenterSize{0, 0, 0, 1, 1, 1}.corners();
  const Box3 b = decode({0, 0, 0, 1e6, 1e6, 1e6}, anchor);
  CHECK(std::isfinite(b.volume()));
  CHECK(b.extent(0) == doctest::Approx(1000.0 / 16.0));
}
