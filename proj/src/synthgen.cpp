#include "voxscreen/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

#include "voxscreen/preprocess.hpp"

namespace voxscreen::synth {

namespace fs = std::filesystem;

namespace {

constexpr int kPlacementTries = 100;

int64_t irand(Rng& rng, int64_t lo, int64_t hi) { return rng.uniform_int(lo, hi); }

/// Two random quarter-turn rotations in random planes: reaches every axis
/// permutation the shapes need.
Volume random_orientation(const Volume& v, Rng& rng) {
  using preprocess::Plane;
  const Plane planes[3] = {Plane::xy, Plane::yz, Plane::xz};
  Volume out = v;
  for (int r = 0; r < 2; ++r) {
    const Plane p = planes[irand(rng, 0, 2)];
    const int angle = 90 * static_cast<int>(irand(rng, 0, 3));
    if (angle) out = preprocess::rotate90(out, p, angle);
  }
  return out;
}

Volume crop_to_mask(const Volume& v) {
  const Dims3& d = v.dims();
  int64_t lo[3] = {d.d, d.h, d.w}, hi[3] = {0, 0, 0};
  for (int64_t z = 0; z < d.d; ++z)
    for (int64_t y = 0; y < d.h; ++y)
      for (int64_t x = 0; x < d.w; ++x) {
        if (v.at(z, y, x) <= 0.f) continue;
        const int64_t p[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], p[a]);
          hi[a] = std::max(hi[a], p[a] + 1);
        }
      }
  Volume out({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  for (int64_t z = 0; z < out.dims().d; ++z)
    for (int64_t y = 0; y < out.dims().h; ++y)
      for (int64_t x = 0; x < out.dims().w; ++x) out.at(z, y, x) = v.at(z + lo[0], y + lo[1], x + lo[2]);
  return out;
}

/// Largest extent along any axis of a scale-1 target.
int64_t max_target_extent(TargetClass c) { return c == TargetClass::bottle ? 24 : 19; }

Target make_bottle(Rng& rng, int64_t k) {
  const int64_t radius = k * irand(rng, 4, 10), length = k * irand(rng, 12, 24), wall = k * irand(rng, 1, 2);
  const auto wall_i = static_cast<float>(rng.uniform(0.85, 0.95));
  const auto fill_i = static_cast<float>(rng.uniform(0.45, 0.6));
  const int64_t side = 2 * radius;
  // axis along w; cross-section centred between voxels
  Volume m({side, side, length});
  const double c = double(radius);
  for (int64_t z = 0; z < side; ++z)
    for (int64_t y = 0; y < side; ++y) {
      const double r = std::hypot(double(z) + 0.5 - c, double(y) + 0.5 - c);
      if (r > c) continue;
      for (int64_t x = 0; x < length; ++x) {
        const bool shell = r > c - double(wall) || x < wall || x >= length - wall;
        m.at(z, y, x) = shell ? wall_i : fill_i;
      }
    }
  return {TargetClass::bottle, m};
}

Target make_handgun(Rng& rng, int64_t k) {
  const int64_t bd = k * irand(rng, 3, 5), bh = k * irand(rng, 3, 5), bw = k * irand(rng, 10, 18);
  const int64_t gd = k * irand(rng, 3, 5), gh = k * irand(rng, 8, 14), gw = k * irand(rng, 3, 5);
  const auto intensity = static_cast<float>(rng.uniform(0.9, 1.0));
  // barrel along w on top, grip hanging down in h from the rear end
  const int64_t D = std::max(bd, gd), H = bh + gh, W = std::max(bw, gw);
  Volume m({D, H, W});
  const int64_t bz = (D - bd) / 2, gz = (D - gd) / 2;
  for (int64_t z = bz; z < bz + bd; ++z)
    for (int64_t y = 0; y < bh; ++y)
      for (int64_t x = 0; x < bw; ++x) m.at(z, y, x) = intensity;
  for (int64_t z = gz; z < gz + gd; ++z)
    for (int64_t y = bh; y < bh + gh; ++y)
      for (int64_t x = 0; x < gw; ++x) m.at(z, y, x) = intensity;
  return {TargetClass::handgun, m};
}

/// Random ellipsoids and boxes drawn into v (later shapes overwrite earlier ones).
void add_clutter(Volume& v, const ClutterConfig& c, int n_shapes, int64_t max_extent, int64_t k, Rng& rng) {
  const Dims3 d = v.dims();
  for (int s = 0; s < n_shapes; ++s) {
    const auto value = static_cast<float>(rng.uniform(c.intensity_lo, c.intensity_hi));
    double centre[3], half[3];
    for (int a = 0; a < 3; ++a) {
      centre[a] = rng.uniform(0.0, double(d[a]));
      half[a] = 0.5 * double(k) * rng.uniform(3.0, double(max_extent));
    }
    const bool ellipsoid = rng.bernoulli(0.5);
    const auto lo = [&](int a) { return std::max<int64_t>(0, int64_t(std::floor(centre[a] - half[a]))); };
    const auto hi = [&](int a) { return std::min<int64_t>(d[a], int64_t(std::ceil(centre[a] + half[a]))); };
    for (int64_t z = lo(0); z < hi(0); ++z)
      for (int64_t y = lo(1); y < hi(1); ++y)
        for (int64_t x = lo(2); x < hi(2); ++x) {
          const double p[3] = {double(z) + 0.5, double(y) + 0.5, double(x) + 0.5};
          bool inside = true;
          if (ellipsoid) {
            double r = 0;
            for (int a = 0; a < 3; ++a) r += std::pow((p[a] - centre[a]) / half[a], 2);
            inside = r <= 1.0;
          } else {
            for (int a = 0; a < 3; ++a) inside = inside && std::abs(p[a] - centre[a]) <= half[a];
          }
          if (inside) v.at(z, y, x) = value;
        }
  }
}

void add_noise(Volume& v, double sigma, Rng& rng) {
  if (sigma <= 0) return;
  for (auto& x : v.data()) x = static_cast<float>(std::max(0.0, double(x) + sigma * rng.normal()));
}

/// Composite a target at `origin`; target voxels take precedence.
Placement paste(Volume& v, const Target& t, const int64_t origin[3]) {
  const Dims3& m = t.mask.dims();
  Placement p;
  p.box = {double(origin[0]), double(origin[1]), double(origin[2]), double(origin[0] + m.d), double(origin[1] + m.h),
           double(origin[2] + m.w)};
  for (int64_t z = 0; z < m.d; ++z)
    for (int64_t y = 0; y < m.h; ++y)
      for (int64_t x = 0; x < m.w; ++x) {
        const float value = t.mask.at(z, y, x);
        if (value <= 0.f) continue;
        const int64_t pz = origin[0] + z, py = origin[1] + y, px = origin[2] + x;
        ++p.mask_voxels;
        if (pz < 0 || py < 0 || px < 0 || pz >= v.dims().d || py >= v.dims().h || px >= v.dims().w) continue;
        v.at(pz, py, px) = value;
        p.contained += pz >= p.box.z0 && pz < p.box.z1 && py >= p.box.y0 && py < p.box.y1 && px >= p.box.x0 &&
                       px < p.box.x1;
      }
  return p;
}

void check_containment(const Sample& s) {
  for (const auto& p : s.placements) {
    if (double(p.contained) < 0.95 * double(p.mask_voxels)) {
      throw std::logic_error("synthgen: annotation of " + s.id + " holds fewer than 95% of its target voxels");
    }
  }
}

}  // namespace

std::string to_string(TargetClass c) { return c == TargetClass::bottle ? "bottle" : "handgun"; }

TargetClass parse_target(const std::string& s) {
  if (s == "bottle") return TargetClass::bottle;
  if (s == "handgun") return TargetClass::handgun;
  throw std::invalid_argument("dataset.target must be bottle or handgun, got \"" + s + "\"");
}

std::string to_string(DatasetConfig::Kind k) { return k == DatasetConfig::Kind::crops ? "crops" : "bags"; }

DatasetConfig::Kind parse_kind(const std::string& s) {
  if (s == "crops") return DatasetConfig::Kind::crops;
  if (s == "bags") return DatasetConfig::Kind::bags;
  throw std::invalid_argument("dataset.kind must be crops or bags, got \"" + s + "\"");
}

DatasetConfig DatasetConfig::defaults(Kind kind, TargetClass target) {
  DatasetConfig c;
  c.kind = kind;
  c.target = target;
  const bool bottle = target == TargetClass::bottle;
  c.n_positive = bottle ? 526 : 284;
  c.n_negative = bottle ? 1178 : 971;
  c.n_volumes = bottle ? 305 : 267;
  c.total_targets = bottle ? 526 : 282;
  return c;
}

void DatasetConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (bag_dims[a] < 16) throw std::invalid_argument("dataset.bag_dims must be >= 16 per axis");
  }
  if (crop_min < 16 || crop_max < crop_min) throw std::invalid_argument("dataset: need 16 <= crop_min <= crop_max");
  if (kind == Kind::crops && crop_max < max_target_extent(target)) {
    throw std::invalid_argument("dataset: crop_max must be >= " + std::to_string(max_target_extent(target)) +
                                ", the largest " + to_string(target) + " extent");
  }
  if (n_positive < 0 || n_negative < 0 || n_volumes < 0) throw std::invalid_argument("dataset counts must be >= 0");
  if (targets_min < 0 || targets_max < targets_min) {
    throw std::invalid_argument("dataset: need 0 <= targets_min <= targets_max");
  }
  if (total_targets < 0) throw std::invalid_argument("dataset.total_targets must be >= 0");
  if (total_targets > 0 && (total_targets < n_volumes * targets_min || total_targets > n_volumes * targets_max)) {
    throw std::invalid_argument("dataset.total_targets cannot be spread over n_volumes within the per-bag range");
  }
  if (clutter.min_shapes < 0 || clutter.max_shapes < clutter.min_shapes) {
    throw std::invalid_argument("dataset.clutter: need 0 <= min_shapes <= max_shapes");
  }
  if (!(clutter.intensity_lo >= 0 && clutter.intensity_lo <= clutter.intensity_hi)) {
    throw std::invalid_argument("dataset.clutter: need 0 <= intensity_lo <= intensity_hi");
  }
  if (voxel_scale < 1) throw std::invalid_argument("dataset.voxel_scale must be >= 1");
  if (!(clutter.noise_sigma >= 0)) throw std::invalid_argument("dataset.clutter.noise_sigma must be >= 0");
}

Target gen_target(TargetClass cls, Rng& rng, int scale) {
  if (scale < 1) throw std::invalid_argument("gen_target: scale must be >= 1");
  Target t = cls == TargetClass::bottle ? make_bottle(rng, scale) : make_handgun(rng, scale);
  t.mask = crop_to_mask(random_orientation(t.mask, rng));
  return t;
}

Sample gen_bag(const DatasetConfig& cfg, int n_targets, Rng& rng) {
  Sample s;
  s.volume = Volume(cfg.bag_dims);
  Rng clutter_rng = rng.split("clutter"), target_rng = rng.split("targets"), noise_rng = rng.split("noise");
  add_clutter(s.volume, cfg.clutter,
              static_cast<int>(irand(clutter_rng, cfg.clutter.min_shapes, cfg.clutter.max_shapes)), 24, cfg.voxel_scale,
              clutter_rng);
  for (int i = 0; i < n_targets; ++i) {
    const Target t = gen_target(cfg.target, target_rng, cfg.voxel_scale);
    const Dims3& m = t.mask.dims();
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
      int64_t origin[3];
      bool fits = true;
      for (int a = 0; a < 3; ++a) {
        if (m[a] > cfg.bag_dims[a]) fits = false;
        origin[a] = fits ? irand(target_rng, 0, cfg.bag_dims[a] - m[a]) : 0;
      }
      if (!fits) break;
      const Box3 box{double(origin[0]), double(origin[1]), double(origin[2]), double(origin[0] + m.d),
                     double(origin[1] + m.h), double(origin[2] + m.w)};
      bool clear = true;
      for (const auto& p : s.placements) {
        const bool apart = box.z1 <= p.box.z0 || p.box.z1 <= box.z0 || box.y1 <= p.box.y0 || p.box.y1 <= box.y0 ||
                           box.x1 <= p.box.x0 || p.box.x1 <= box.x0;
        clear = clear && apart;
      }
      if (!clear) continue;
      s.placements.push_back(paste(s.volume, t, origin));
      s.boxes.push_back({to_string(cfg.target), box});
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error(fmt::format("synthgen: no room for target {} of {} in a {}x{}x{} bag", i + 1, n_targets,
                                           cfg.bag_dims.d, cfg.bag_dims.h, cfg.bag_dims.w));
    }
  }
  add_noise(s.volume, cfg.clutter.noise_sigma, noise_rng);
  s.label = s.boxes.empty() ? 0 : 1;
  return s;
}

Sample gen_crop(const DatasetConfig& cfg, bool positive, Rng& rng) {
  Rng target_rng = rng.split("targets"), layout_rng = rng.split("layout"), clutter_rng = rng.split("clutter"),
      noise_rng = rng.split("noise");
  // negatives size themselves after a target they never contain, so extent
  // carries no class information
  const Target t = gen_target(cfg.target, target_rng);
  Dims3 dims;
  int64_t origin[3];
  for (int a = 0; a < 3; ++a) {
    const int64_t extent = t.mask.dims()[a];
    const int64_t lo = irand(layout_rng, 2, 8), hi = irand(layout_rng, 2, 8);
    dims[a] = std::clamp<int64_t>(extent + lo + hi, cfg.crop_min, cfg.crop_max);
    const int64_t slack = dims[a] - extent;
    origin[a] = slack <= 0 ? 0 : std::clamp<int64_t>(lo + (slack - lo - hi) / 2, 0, slack);
  }
  Sample s;
  s.volume = Volume(dims);
  const int n_shapes = static_cast<int>(irand(clutter_rng, 2, std::max(2, cfg.clutter.max_shapes / 2)));
  add_clutter(s.volume, cfg.clutter, n_shapes, 16, 1, clutter_rng);
  if (positive) {
    Placement p = paste(s.volume, t, origin);
    p.box = clip_box(p.box, dims);
    s.placements.push_back(p);
    s.boxes.push_back({to_string(cfg.target), p.box});
  }
  add_noise(s.volume, cfg.clutter.noise_sigma, noise_rng);
  s.label = positive ? 1 : 0;
  return s;
}

std::vector<int> bag_target_counts(const DatasetConfig& cfg) {
  Rng rng = Rng(cfg.seed).split("target-counts");
  const auto n = static_cast<size_t>(cfg.n_volumes);
  std::vector<int> counts(n, cfg.targets_min);
  if (cfg.total_targets == 0) {
    for (auto& c : counts) c = static_cast<int>(irand(rng, cfg.targets_min, cfg.targets_max));
    return counts;
  }
  int64_t remaining = cfg.total_targets - cfg.n_volumes * cfg.targets_min;
  std::vector<size_t> open(n);
  for (size_t i = 0; i < n; ++i) open[i] = i;
  while (remaining > 0 && !open.empty()) {
    const auto k = static_cast<size_t>(irand(rng, 0, int64_t(open.size()) - 1));
    if (++counts[open[k]] == cfg.targets_max) {
      open[k] = open.back();
      open.pop_back();
    }
    --remaining;
  }
  return counts;
}

Sample make_sample(const DatasetConfig& cfg, int64_t index, const std::vector<int>& bag_counts) {
  if (index < 0 || index >= cfg.sample_count()) throw std::out_of_range("synthgen: sample index out of range");
  Rng rng = Rng(cfg.seed).split(static_cast<uint64_t>(index));
  Sample s;
  if (cfg.kind == DatasetConfig::Kind::crops) {
    s = gen_crop(cfg, index < cfg.n_positive, rng);
    s.id = fmt::format("{}_crop_{:05d}", to_string(cfg.target), index);
  } else {
    s = gen_bag(cfg, bag_counts.at(size_t(index)), rng);
    s.id = fmt::format("{}_bag_{:05d}", to_string(cfg.target), index);
  }
  s.volume.set_id(s.id);
  check_containment(s);
  return s;
}

Sample make_sample(const DatasetConfig& cfg, int64_t index) {
  return make_sample(cfg, index, cfg.kind == DatasetConfig::Kind::bags ? bag_target_counts(cfg) : std::vector<int>{});
}

double separability(const Sample& s) {
  const Dims3& d = s.volume.dims();
  double in = 0, out = 0;
  int64_t n_in = 0, n_out = 0;
  for (int64_t z = 0; z < d.d; ++z)
    for (int64_t y = 0; y < d.h; ++y)
      for (int64_t x = 0; x < d.w; ++x) {
        bool inside = false;
        for (const auto& a : s.boxes) {
          inside = inside || (z >= a.box.z0 && z < a.box.z1 && y >= a.box.y0 && y < a.box.y1 && x >= a.box.x0 &&
                              x < a.box.x1);
        }
        (inside ? in : out) += s.volume.at(z, y, x);
        ++(inside ? n_in : n_out);
      }
  if (n_in == 0 || n_out == 0) return 0.0;
  return in / double(n_in) - out / double(n_out);
}

std::vector<eval::TrainTest> plan_splits(const eval::SplitPlan& plan, const std::vector<int>& labels) {
  plan.validate();
  if (plan.mode == eval::SplitPlan::Mode::kfold) {
    return eval::kfold_train_test(eval::kfold_split(labels, plan.k, plan.seed));
  }
  return eval::random_splits(labels.size(), plan.train_fraction, plan.n_repeats, plan.seed);
}

nlohmann::json splits_to_json(const eval::SplitPlan& plan, const std::vector<eval::TrainTest>& splits) {
  nlohmann::json j;
  const bool kfold = plan.mode == eval::SplitPlan::Mode::kfold;
  j["mode"] = kfold ? "kfold" : "random";
  j["seed"] = plan.seed;
  if (kfold) {
    j["k"] = plan.k;
  } else {
    j["train_fraction"] = plan.train_fraction;
    j["n_repeats"] = plan.n_repeats;
  }
  j["splits"] = nlohmann::json::array();
  for (const auto& s : splits) j["splits"].push_back({{"train", s.train}, {"test", s.test}});
  return j;
}

std::vector<eval::TrainTest> splits_from_json(const nlohmann::json& j) {
  std::vector<eval::TrainTest> out;
  for (const auto& s : j.at("splits")) {
    out.push_back({s.at("train").get<std::vector<size_t>>(), s.at("test").get<std::vector<size_t>>()});
  }
  return out;
}

GeneratedDataset gen_dataset(const DatasetConfig& cfg, const eval::SplitPlan& plan, const fs::path& out) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out / "volumes", ec);
  if (ec) throw std::runtime_error("cannot create " + (out / "volumes").string() + ": " + ec.message());
  const int64_t n = cfg.sample_count();
  const auto counts = cfg.kind == DatasetConfig::Kind::bags ? bag_target_counts(cfg) : std::vector<int>{};
  GeneratedDataset ds;
  ds.entries.resize(size_t(n));
  ds.labels.resize(size_t(n));
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < n; ++i) {
    try {
      const Sample s = make_sample(cfg, i, counts);
      const std::string rel = "volumes/" + s.id + ".vol";
      save_volume(s.volume, out / rel);
      ds.entries[size_t(i)] = {rel, s.id, s.boxes};
      ds.labels[size_t(i)] = s.label;
    } catch (const std::exception& e) {
#pragma omp critical
      if (error.empty()) error = e.what();
    }
  }
  if (!error.empty()) throw std::runtime_error(error);
  write_manifest(ds.entries, out / "manifest.json");
  const auto splits = plan_splits(plan, ds.labels);
  std::ofstream f(out / "splits.json");
  if (!f) throw std::runtime_error("cannot open " + (out / "splits.json").string() + " for writing");
  f << splits_to_json(plan, splits).dump(2) << '\n';
  return ds;
}

}  // namespace voxscreen::synth
