#include "voxscreen/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace voxscreen::preprocess {

void PreprocessConfig::validate() const {
  if (s < 1) throw std::invalid_argument("preprocess.s must be >= 1");
  if (!(rotation_probability >= 0.0 && rotation_probability <= 1.0)) {
    throw std::invalid_argument("preprocess.rotation_probability must lie in [0, 1]");
  }
  if (!(resample_factor > 0.0 && resample_factor <= 1.0)) {
    throw std::invalid_argument("preprocess.resample_factor must lie in (0, 1]");
  }
}

double parse_factor(const std::string& text) {
  const auto slash = text.find('/');
  try {
    if (slash == std::string::npos) return std::stod(text);
    const double num = std::stod(text.substr(0, slash));
    const double den = std::stod(text.substr(slash + 1));
    if (den == 0.0) throw std::invalid_argument("zero denominator");
    return num / den;
  } catch (const std::exception&) {
    throw std::invalid_argument("cannot parse factor \"" + text + "\"");
  }
}

Dims3 rescale_factors(const Dims3& dims, int s) {
  if (s < 1) throw std::invalid_argument("rescale: s must be >= 1");
  return {std::max<int64_t>(1, dims.d / s), std::max<int64_t>(1, dims.h / s), std::max<int64_t>(1, dims.w / s)};
}

Volume downsample_mean(const Volume& v, const Dims3& f) {
  const Dims3& in = v.dims();
  if (f.d == 1 && f.h == 1 && f.w == 1) return v;
  const Dims3 out{(in.d + f.d - 1) / f.d, (in.h + f.h - 1) / f.h, (in.w + f.w - 1) / f.w};
  Volume result(out, 0.0f, v.id());
  for (int64_t z = 0; z < out.d; ++z) {
    const int64_t z0 = z * f.d, z1 = std::min(in.d, z0 + f.d);
    for (int64_t y = 0; y < out.h; ++y) {
      const int64_t y0 = y * f.h, y1 = std::min(in.h, y0 + f.h);
      for (int64_t x = 0; x < out.w; ++x) {
        const int64_t x0 = x * f.w, x1 = std::min(in.w, x0 + f.w);
        double sum = 0.0;
        for (int64_t zz = z0; zz < z1; ++zz)
          for (int64_t yy = y0; yy < y1; ++yy)
            for (int64_t xx = x0; xx < x1; ++xx) sum += v.at(zz, yy, xx);
        const double count = static_cast<double>((z1 - z0) * (y1 - y0) * (x1 - x0));
        result.at(z, y, x) = static_cast<float>(sum / count);
      }
    }
  }
  return result;
}

Volume rescale_volume(const Volume& v, int s) { return downsample_mean(v, rescale_factors(v.dims(), s)); }

namespace {

bool integer_reciprocal(double factor, int64_t& k) {
  const double r = 1.0 / factor;
  k = std::llround(r);
  return k >= 1 && std::abs(r - static_cast<double>(k)) < 1e-6;
}

Volume trilinear_resample(const Volume& v, double factor) {
  const Dims3& in = v.dims();
  const Dims3 out{std::max<int64_t>(1, std::llround(in.d * factor)), std::max<int64_t>(1, std::llround(in.h * factor)),
                  std::max<int64_t>(1, std::llround(in.w * factor))};
  Volume result(out, 0.0f, v.id());
  auto sample_axis = [](int64_t o, int64_t n_out, int64_t n_in, int64_t& i0, int64_t& i1, double& t) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
    i0 = static_cast<int64_t>(std::floor(src));
    i1 = std::min(i0 + 1, n_in - 1);
    t = src - static_cast<double>(i0);
  };
  for (int64_t z = 0; z < out.d; ++z) {
    int64_t z0, z1;
    double tz;
    sample_axis(z, out.d, in.d, z0, z1, tz);
    for (int64_t y = 0; y < out.h; ++y) {
      int64_t y0, y1;
      double ty;
      sample_axis(y, out.h, in.h, y0, y1, ty);
      for (int64_t x = 0; x < out.w; ++x) {
        int64_t x0, x1;
        double tx;
        sample_axis(x, out.w, in.w, x0, x1, tx);
        auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
        const double c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), tx);
        const double c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), tx);
        const double c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), tx);
        const double c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), tx);
        result.at(z, y, x) = static_cast<float>(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
      }
    }
  }
  return result;
}

}  // namespace

Volume resample_volume(const Volume& v, double factor) {
  if (!(factor > 0.0 && factor <= 1.0)) throw std::invalid_argument("resample factor must lie in (0, 1]");
  int64_t k = 1;
  if (integer_reciprocal(factor, k)) return downsample_mean(v, Dims3{k, k, k});
  return trilinear_resample(v, factor);
}

AxisScale resample_scale(const Dims3& source, const Dims3& resampled, double factor) {
  int64_t k = 1;
  if (integer_reciprocal(factor, k)) {
    const auto kd = static_cast<double>(k);
    return {kd, kd, kd};
  }
  return {static_cast<double>(source.d) / static_cast<double>(resampled.d),
          static_cast<double>(source.h) / static_cast<double>(resampled.h),
          static_cast<double>(source.w) / static_cast<double>(resampled.w)};
}

std::string to_string(Plane p) {
  switch (p) {
    case Plane::xy: return "xy";
    case Plane::yz: return "yz";
    case Plane::xz: return "xz";
  }
  return "?";
}

namespace {

// Rotation axes (a, b) for each plane, in (z, y, x) numbering.
std::array<int, 2> plane_axes(Plane p) {
  switch (p) {
    case Plane::xy: return {1, 2};
    case Plane::yz: return {0, 1};
    case Plane::xz: return {0, 2};
  }
  throw std::invalid_argument("unknown plane");
}

Volume quarter_turn(const Volume& v, Plane plane) {
  const auto [a, b] = plane_axes(plane);
  const Dims3& in = v.dims();
  Dims3 out = in;
  out[a] = in[b];
  out[b] = in[a];
  Volume result(out, 0.0f, v.id());
  std::array<int64_t, 3> i{};
  for (i[0] = 0; i[0] < in.d; ++i[0]) {
    for (i[1] = 0; i[1] < in.h; ++i[1]) {
      for (i[2] = 0; i[2] < in.w; ++i[2]) {
        std::array<int64_t, 3> o = i;
        o[a] = i[b];
        o[b] = in[a] - 1 - i[a];
        result.at(o[0], o[1], o[2]) = v.at(i[0], i[1], i[2]);
      }
    }
  }
  return result;
}

}  // namespace

Volume rotate90(const Volume& v, Plane plane, int angle_degrees) {
  if (angle_degrees != 90 && angle_degrees != 180 && angle_degrees != 270) {
    throw std::invalid_argument("rotate90: angle must be 90, 180 or 270");
  }
  Volume out = quarter_turn(v, plane);
  for (int turns = angle_degrees / 90; turns > 1; --turns) out = quarter_turn(out, plane);
  return out;
}

Volume augment(const Volume& v, const PreprocessConfig& cfg, Rng& rng) {
  if (!rng.bernoulli(cfg.rotation_probability)) return v;
  const auto plane = static_cast<Plane>(rng.uniform_int(0, 2));
  const int angle = static_cast<int>(rng.uniform_int(1, 3)) * 90;
  return rotate90(v, plane, angle);
}

}  // namespace voxscreen::preprocess
