#pragma once

#include <array>
#include <vector>

#include "voxscreen/tensor.hpp"

namespace voxscreen::nn {

using Int3 = std::array<int64_t, 3>;

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// sum(x * w) for a constant weight array; handy for probing gradients.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> w);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Concatenate along axis 1; all other dims must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts);

/// Cross-correlation. input [N,Cin,D,H,W], weight [Cout,Cin,kd,kh,kw], bias
/// [Cout] or undefined. Output extent per axis: (in + 2*pad - k) / stride + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Int3 stride, Int3 padding);

/// Bin i on an axis of size n spans [floor(i*n/o), ceil((i+1)*n/o)).
template <typename T>
Tensor<T> adaptive_avg_pool3d(const Tensor<T>& input, Int3 out_dims);

/// Per-channel normalisation over (N,D,H,W). In training mode the batch
/// statistics are used and the running estimates updated in place
/// (running = (1-momentum)*running + momentum*batch, unbiased variance).
template <typename T>
Tensor<T> batch_norm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

/// Normalise over (C/groups, D, H, W) per sample and group, then per-channel affine.
template <typename T>
Tensor<T> group_norm3d(const Tensor<T>& input, int64_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                       double eps = 1e-5);

/// input [N,in], weight [out,in], bias [out] or undefined -> [N,out].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// Nearest-neighbour 2x upsampling of [N,C,d,h,w] onto target spatial dims.
/// Source index is min(i/2, n-1), so a target larger than 2x repeats the
/// border and a smaller one crops.
template <typename T>
Tensor<T> upsample_nearest3d(const Tensor<T>& input, Int3 target);

/// Integer region [z0,y0,x0,z1,y1,x1) inside a feature volume.
struct Region {
  std::array<int64_t, 6> bounds;
};

/// For each region, adaptive average pooling of input[0, :, region] to
/// out_dims. Output [R, C, od, oh, ow].
template <typename T>
Tensor<T> roi_pool3d(const Tensor<T>& input, const std::vector<Region>& regions, Int3 out_dims);

}  // namespace voxscreen::nn
