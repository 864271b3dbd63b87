#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "voxscreen/synthgen.hpp"

using namespace voxscreen;
using namespace voxscreen::synth;
namespace fs = std::filesystem;

namespace {

int64_t mask_voxels(const Volume& m) {
  int64_t n = 0;
  for (float v : m.data()) n += v > 0.f;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("voxscreen_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("bottle masks are hollow cylinders") {
  Rng rng(1);
  for (int i = 0; i < 30; ++i) {
    const Target t = gen_target(TargetClass::bottle, rng);
    const Dims3 d = t.mask.dims();
    // two equal cross-section extents (the diameter) and one length axis
    int axis = -1;
    if (d.h == d.w) axis = 0;
    if (d.d == d.w) axis = 1;
    if (d.d == d.h) axis = 2;
    REQUIRE(axis >= 0);
    const int64_t diameter = d[(axis + 1) % 3];
    CHECK(diameter >= 8);
    CHECK(diameter <= 20);
    CHECK(d[axis] >= 12);
    CHECK(d[axis] <= 24);
    // the central voxel holds the fill, which differs from the wall
    const float centre = t.mask.at(d.d / 2, d.h / 2, d.w / 2);
    float wall = 0;
    for (float v : t.mask.data()) wall = std::max(wall, v);
    CHECK(centre > 0.f);
    CHECK(centre < wall);
  }
}

TEST_CASE("bottle cross-sections are symmetric under quarter turns") {
  Rng rng(2);
  const Target t = gen_target(TargetClass::bottle, rng);
  const Dims3 d = t.mask.dims();
  // find the length axis and compare each slice with its 90-degree turn
  const int axis = d.h == d.w ? 0 : d.d == d.w ? 1 : 2;
  const int64_t n = d[(axis + 1) % 3];
  const auto at = [&](int64_t l, int64_t u, int64_t v) {
    int64_t p[3];
    p[axis] = l;
    p[(axis + 1) % 3] = u;
    p[(axis + 2) % 3] = v;
    return t.mask.at(p[0], p[1], p[2]) > 0.f;
  };
  for (int64_t l = 0; l < d[axis]; ++l)
    for (int64_t u = 0; u < n; ++u)
      for (int64_t v = 0; v < n; ++v) CHECK(at(l, u, v) == at(l, v, n - 1 - u));
}

TEST_CASE("handgun masks are an L of two boxes") {
  Rng rng(3);
  for (int i = 0; i < 30; ++i) {
    const Target t = gen_target(TargetClass::handgun, rng);
    const Dims3 d = t.mask.dims();
    const int64_t n = mask_voxels(t.mask);
    // the union of two boxes fills its bounding box only partially
    CHECK(n < d.voxels());
    CHECK(n >= 3 * 3 * 10 + 3 * 8 * 3);
    std::vector<int64_t> e{d.d, d.h, d.w};
    std::sort(e.begin(), e.end());
    CHECK(e[0] >= 3);
    CHECK(e[0] <= 5);
    CHECK(e[2] >= 10);
  }
}

TEST_CASE("annotation box is the tight box of the target") {
  DatasetConfig cfg = DatasetConfig::defaults(DatasetConfig::Kind::bags, TargetClass::handgun);
  cfg.n_volumes = 6;
  cfg.total_targets = 8;
  for (int64_t i = 0; i < cfg.n_volumes; ++i) {
    const Sample s = make_sample(cfg, i);
    REQUIRE(s.placements.size() == s.boxes.size());
    for (size_t k = 0; k < s.boxes.size(); ++k) {
      const Box3& b = s.boxes[k].box;
      CHECK(s.placements[k].contained == s.placements[k].mask_voxels);
      CHECK(b.z0 >= 0);
      CHECK(b.x1 <= 64);
      CHECK(s.boxes[k].label == "handgun");
    }
  }
}

TEST_CASE("bags are deterministic and honour the target count") {
  DatasetConfig cfg = DatasetConfig::defaults(DatasetConfig::Kind::bags, TargetClass::bottle);
  cfg.n_volumes = 4;
  cfg.total_targets = 0;
  cfg.targets_min = cfg.targets_max = 0;
  CHECK(make_sample(cfg, 0).boxes.empty());
  cfg.targets_min = 1;
  cfg.targets_max = 3;
  const Sample a = make_sample(cfg, 2), b = make_sample(cfg, 2);
  CHECK(std::ranges::equal(a.volume.data(), b.volume.data()));
  REQUIRE(a.boxes.size() == b.boxes.size());
  for (size_t i = 0; i < a.boxes.size(); ++i) CHECK(a.boxes[i].box == b.boxes[i].box);
  const Sample other = make_sample(cfg, 1);
  CHECK(!std::ranges::equal(other.volume.data(), a.volume.data()));
}

TEST_CASE("target totals spread over bags") {
  const DatasetConfig cfg = DatasetConfig::defaults(DatasetConfig::Kind::bags, TargetClass::bottle);
  const auto counts = bag_target_counts(cfg);
  CHECK(counts.size() == 305);
  CHECK(std::accumulate(counts.begin(), counts.end(), 0) == 526);
  for (int c : counts) CHECK((c >= 1 && c <= 2));
  const DatasetConfig hg = DatasetConfig::defaults(DatasetConfig::Kind::bags, TargetClass::handgun);
  const auto hc = bag_target_counts(hg);
  CHECK(std::accumulate(hc.begin(), hc.end(), 0) == 282);
}

TEST_CASE("placement failure is reported") {
  DatasetConfig cfg = DatasetConfig::defaults(DatasetConfig::Kind::bags, TargetClass::bottle);
  cfg.bag_dims = {16, 16, 16};
  cfg.n_volumes = 1;
  cfg.total_targets = 0;
  cfg.targets_min = cfg.targets_max = 40;
  CHECK_THROWS_AS(make_sample(cfg, 0), std::runtime_error);
}

TEST_CASE("crop defaults and contents") {
  const DatasetConfig bottle = DatasetConfig::defaults(DatasetConfig::Kind::crops, TargetClass::bottle);
  CHECK(bottle.n_positive == 526);
  CHECK(bottle.n_negative == 1178);
  const DatasetConfig gun = DatasetConfig::defaults(DatasetConfig::Kind::crops, TargetClass::handgun);
  CHECK(gun.n_positive == 284);
  CHECK(gun.n_negative == 971);

  std::set<std::array<int64_t, 3>> shapes;
  for (int64_t i : {0, 1, 2, 3, 600, 601, 602, 603}) {
    const Sample s = make_sample(bottle, i);
    const Dims3 d = s.volume.dims();
    shapes.insert({d.d, d.h, d.w});
    for (int a = 0; a < 3; ++a) {
      CHECK(d[a] >= 16);
      CHECK(d[a] <= 48);
    }
    CHECK(s.label == (i < 526 ? 1 : 0));
    if (s.label) {
      REQUIRE(s.boxes.size() == 1);
      CHECK(s.placements[0].contained > 0);
    } else {
      CHECK(s.boxes.empty());
    }
  }
  CHECK(shapes.size() > 1);
}

TEST_CASE("targets stand out from the background on defaults") {
  for (auto target : {TargetClass::bottle, TargetClass::handgun}) {
    DatasetConfig cfg = DatasetConfig::defaults(DatasetConfig::Kind::bags, target);
    double sum = 0;
    for (int64_t i = 0; i < 10; ++i) sum += separability(make_sample(cfg, i));
    MESSAGE(to_string(target) << " separability " << sum / 10);
    CHECK(sum / 10 >= 0.1);
  }
}

TEST_CASE("config validation") {
  DatasetConfig cfg;
  cfg.bag_dims = {8, 64, 64};
  CHECK_THROWS(cfg.validate());
  cfg = DatasetConfig{};
  cfg.crop_min = 10;
  CHECK_THROWS(cfg.validate());
  cfg = DatasetConfig::defaults(DatasetConfig::Kind::bags, TargetClass::bottle);
  cfg.total_targets = 10000;
  CHECK_THROWS(cfg.validate());
  CHECK_THROWS(parse_target("knife"));
  CHECK(parse_kind("bags") == DatasetConfig::Kind::bags);
}

TEST_CASE("dataset on disk is reproducible") {
  DatasetConfig cfg = DatasetConfig::defaults(DatasetConfig::Kind::crops, TargetClass::handgun);
  cfg.n_positive = 12;
  cfg.n_negative = 20;
  cfg.seed = 42;
  eval::SplitPlan plan;
  plan.k = 4;
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const auto ds = gen_dataset(cfg, plan, a);
  gen_dataset(cfg, plan, b);
  CHECK(ds.entries.size() == 32);
  const auto manifest = read_manifest(a / "manifest.json");
  CHECK(manifest.size() == 32);
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(slurp(a / "splits.json") == slurp(b / "splits.json"));
  for (const auto& e : manifest) CHECK(slurp(a / e.volume) == slurp(b / e.volume));
  // a second run into the same directory rewrites identical bytes
  const std::string before = slurp(a / manifest[5].volume);
  gen_dataset(cfg, plan, a);
  CHECK(slurp(a / manifest[5].volume) == before);

  const auto splits = splits_from_json(nlohmann::json::parse(slurp(a / "splits.json")));
  CHECK(splits.size() == 4);
  for (const auto& s : splits) CHECK(s.train.size() + s.test.size() == 32);
  fs::remove_all(a);
  fs::remove_all(b);
}
