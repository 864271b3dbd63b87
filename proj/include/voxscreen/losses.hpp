#pragma once

#include <span>

#include "voxscreen/tensor.hpp"

namespace voxscreen::nn {

// Probability inputs are clamped to [kProbEps, 1 - kProbEps] before the log;
// the gradient is zero for clamped elements.
inline constexpr double kProbEps = 1e-7;

/// Mean binary cross-entropy of probabilities p against targets y.
template <typename T>
Tensor<T> bce(const Tensor<T>& p, std::span<const T> y);

/// Mean focal loss of probabilities: for y=1, -alpha (1-p)^gamma ln p; for
/// y=0, -(1-alpha) p^gamma ln(1-p). Soft targets mix the two terms linearly.
template <typename T>
Tensor<T> focal(const Tensor<T>& p, std::span<const T> y, double alpha, double gamma);

/// Mean smooth-L1: 0.5 d^2 / beta for |d| < beta, else |d| - 0.5 beta.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& x, std::span<const T> t, double beta);

// Detector-head variants. They take logits (numerically stable for saturated
// scores) and return the weighted sum; weight 0 excludes an element. The
// caller normalises, e.g. by the positive-anchor count.

template <typename T>
Tensor<T> sigmoid_focal_with_logits(const Tensor<T>& logits, std::span<const T> y, std::span<const T> weight,
                                    double alpha, double gamma);

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> y, std::span<const T> weight);

template <typename T>
Tensor<T> smooth_l1_sum(const Tensor<T>& x, std::span<const T> t, std::span<const T> weight, double beta);

}  // namespace voxscreen::nn
