#pragma once

// Central-difference verification of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "voxscreen/tensor.hpp"

namespace voxscreen::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double analytic = 0.0;  // values at the worst element
  double numeric = 0.0;
  int64_t checked = 0;
};

struct GradCheckOptions {
  double h = 1e-5;
  int64_t max_elements = 0;  // per tensor; 0 checks every element, else an even stride
  double floor = 1e-6;       // relative error is |a - n| / max(|a|, |n|, floor)
};

/// Compares d f() / d t for every tensor t in `wrt` against
/// (f(t + h) - f(t - h)) / 2h. `f` must rebuild its graph on every call and
/// return a scalar; the tensors are perturbed in place and restored.
template <typename T>
GradCheckResult gradient_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> wrt,
                               const GradCheckOptions& opt = {}) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  f().backward();
  std::vector<std::vector<T>> analytic;
  for (auto& t : wrt) {
    const auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (size_t k = 0; k < wrt.size(); ++k) {
    T* x = wrt[k].data();
    const int64_t n = wrt[k].numel();
    const int64_t stride = opt.max_elements > 0 && n > opt.max_elements ? (n + opt.max_elements - 1) / opt.max_elements : 1;
    for (int64_t i = 0; i < n; i += stride) {
      const T saved = x[i];
      x[i] = static_cast<T>(saved + opt.h);
      const double up = f().item();
      x[i] = static_cast<T>(saved - opt.h);
      const double down = f().item();
      x[i] = saved;
      const double num = (up - down) / (2.0 * opt.h);
      const double a = analytic[k][static_cast<size_t>(i)];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), opt.floor});
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.analytic = a;
        result.numeric = num;
      }
    }
  }
  for (auto& t : wrt) t.zero_grad();
  return result;
}

/// Single-input form: max relative error of the gradient of f at x.
template <typename T>
double gradient_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, double h = 1e-5) {
  Tensor<T> leaf = x.detach();
  GradCheckOptions opt;
  opt.h = h;
  return gradient_check<T>([&] { return f(leaf); }, {leaf}, opt).max_rel_error;
}

}  // namespace voxscreen::nn
