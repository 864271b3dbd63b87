#include "voxscreen/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace voxscreen::nn {

namespace {

template <typename T>
void check_sizes(const Tensor<T>& x, size_t n, const char* op) {
  if (!x.defined() || static_cast<size_t>(x.numel()) != n) {
    throw std::invalid_argument(std::string(op) + ": target size does not match input");
  }
}

void check_focal(double alpha, double gamma) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("focal: alpha must lie in [0,1]");
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal: gamma must be >= 0");
}

void check_beta(double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Elementwise scalar loss with derivative, reduced to a scalar tensor as
// sum_i w_i * l(x_i). Reduction in double.
template <typename T, typename F>
Tensor<T> reduce_loss(const Tensor<T>& x, std::span<const T> weight, double scale, F&& loss) {
  const size_t n = static_cast<size_t>(x.numel());
  const T* px = x.data();
  std::vector<T> dl(n);
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double w = weight.empty() ? 1.0 : double(weight[i]);
    if (w == 0.0) {
      dl[i] = T(0);
      continue;
    }
    double d = 0.0;
    total += w * loss(i, double(px[i]), d);
    dl[i] = static_cast<T>(w * d * scale);
  }
  return Tensor<T>::make_result(Shape{}, {static_cast<T>(total * scale)}, {x},
                                [x, dl = std::move(dl)](detail::Node<T>& node) {
                                  T* gx = x.node()->grad_buffer();
                                  const T g = node.grad[0];
                                  for (size_t i = 0; i < dl.size(); ++i) gx[i] += g * dl[i];
                                });
}

double clamp_prob(double p, bool& clamped) {
  const double c = std::clamp(p, kProbEps, 1.0 - kProbEps);
  clamped = c != p;
  return c;
}

}  // namespace

template <typename T>
Tensor<T> bce(const Tensor<T>& p, std::span<const T> y) {
  check_sizes(p, y.size(), "bce");
  return reduce_loss(p, std::span<const T>{}, 1.0 / double(y.size()), [&](size_t i, double v, double& d) {
    bool clamped = false;
    const double q = clamp_prob(v, clamped);
    const double t = y[i];
    d = clamped ? 0.0 : -t / q + (1.0 - t) / (1.0 - q);
    return -(t * std::log(q) + (1.0 - t) * std::log(1.0 - q));
  });
}

template <typename T>
Tensor<T> focal(const Tensor<T>& p, std::span<const T> y, double alpha, double gamma) {
  check_sizes(p, y.size(), "focal");
  check_focal(alpha, gamma);
  return reduce_loss(p, std::span<const T>{}, 1.0 / double(y.size()), [&](size_t i, double v, double& d) {
    bool clamped = false;
    const double q = clamp_prob(v, clamped);
    const double t = y[i];
    const double lp = std::log(q), lq = std::log(1.0 - q);
    const double pos = -alpha * std::pow(1.0 - q, gamma) * lp;
    const double neg = -(1.0 - alpha) * std::pow(q, gamma) * lq;
    // gamma * base^(gamma-1) written so that gamma = 0 gives exactly 0
    const double dpos_pow = gamma == 0.0 ? 0.0 : gamma * std::pow(1.0 - q, gamma - 1.0);
    const double dneg_pow = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
    const double dpos = alpha * (dpos_pow * lp - std::pow(1.0 - q, gamma) / q);
    const double dneg = -(1.0 - alpha) * (dneg_pow * lq - std::pow(q, gamma) / (1.0 - q));
    d = clamped ? 0.0 : t * dpos + (1.0 - t) * dneg;
    return t * pos + (1.0 - t) * neg;
  });
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& x, std::span<const T> t, double beta) {
  check_sizes(x, t.size(), "smooth_l1");
  check_beta(beta);
  return reduce_loss(x, std::span<const T>{}, 1.0 / double(t.size()), [&](size_t i, double v, double& d) {
    const double r = v - double(t[i]);
    if (std::abs(r) < beta) {
      d = r / beta;
      return 0.5 * r * r / beta;
    }
    d = r > 0 ? 1.0 : -1.0;
    return std::abs(r) - 0.5 * beta;
  });
}

template <typename T>
Tensor<T> sigmoid_focal_with_logits(const Tensor<T>& logits, std::span<const T> y, std::span<const T> weight,
                                    double alpha, double gamma) {
  check_sizes(logits, y.size(), "sigmoid_focal_with_logits");
  check_sizes(logits, weight.size(), "sigmoid_focal_with_logits");
  check_focal(alpha, gamma);
  return reduce_loss(logits, weight, 1.0, [&](size_t i, double z, double& d) {
    const double p = sigmoid(z), q = 1.0 - p;
    const double t = y[i];
    // -ln p = softplus(-z), -ln(1-p) = softplus(z)
    const double sp_neg = softplus(-z), sp_pos = softplus(z);
    const double qg = std::pow(q, gamma), pg = std::pow(p, gamma);
    const double pos = alpha * qg * sp_neg;
    const double neg = (1.0 - alpha) * pg * sp_pos;
    const double dpos = -alpha * qg * (gamma * p * sp_neg + q);
    const double dneg = (1.0 - alpha) * pg * (gamma * q * sp_pos + p);
    d = t * dpos + (1.0 - t) * dneg;
    return t * pos + (1.0 - t) * neg;
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> y, std::span<const T> weight) {
  check_sizes(logits, y.size(), "bce_with_logits");
  check_sizes(logits, weight.size(), "bce_with_logits");
  return reduce_loss(logits, weight, 1.0, [&](size_t i, double z, double& d) {
    d = sigmoid(z) - double(y[i]);
    return softplus(z) - double(y[i]) * z;
  });
}

template <typename T>
Tensor<T> smooth_l1_sum(const Tensor<T>& x, std::span<const T> t, std::span<const T> weight, double beta) {
  check_sizes(x, t.size(), "smooth_l1_sum");
  check_sizes(x, weight.size(), "smooth_l1_sum");
  check_beta(beta);
  return reduce_loss(x, weight, 1.0, [&](size_t i, double v, double& d) {
    const double r = v - double(t[i]);
    if (std::abs(r) < beta) {
      d = r / beta;
      return 0.5 * r * r / beta;
    }
    d = r > 0 ? 1.0 : -1.0;
    return std::abs(r) - 0.5 * beta;
  });
}

#define VOXSCREEN_INSTANTIATE(T)                                                                                \
  template Tensor<T> bce(const Tensor<T>&, std::span<const T>);                                                 \
  template Tensor<T> focal(const Tensor<T>&, std::span<const T>, double, double);                               \
  template Tensor<T> smooth_l1(const Tensor<T>&, std::span<const T>, double);                                   \
  template Tensor<T> sigmoid_focal_with_logits(const Tensor<T>&, std::span<const T>, std::span<const T>, double, \
                                               double);                                                         \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const T>, std::span<const T>);                 \
  template Tensor<T> smooth_l1_sum(const Tensor<T>&, std::span<const T>, std::span<const T>, double);

VOXSCREEN_INSTANTIATE(float)
VOXSCREEN_INSTANTIATE(double)
#undef VOXSCREEN_INSTANTIATE

}  // namespace voxscreen::nn
