#pragma once

// Dense compute kernels behind the tensor engine. Two implementations share
// one interface:
//   parallel::  packed, register-blocked GEMM and im2col convolution, OpenMP
//   serial::    naive loops, kept as the reference the parallel path is tested
//               and benchmarked against
// Every backward kernel accumulates (+=) into its output buffer. Each output
// element is produced by exactly one thread with a fixed summation order, so
// results do not depend on the thread count.

#include <array>
#include <cstdint>
#include <string>

namespace voxscreen::kernels {

enum class Trans { no, yes };

struct ConvShape {
  int64_t batch = 1;
  int64_t in_channels = 1;
  int64_t out_channels = 1;
  std::array<int64_t, 3> in{};
  std::array<int64_t, 3> kernel{};
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> pad{0, 0, 0};
  std::array<int64_t, 3> out{};

  /// Fill `out` from the other fields; throws std::invalid_argument naming the
  /// offending axis when the kernel does not fit the padded input.
  static ConvShape make(int64_t batch, int64_t in_channels, int64_t out_channels, std::array<int64_t, 3> in,
                        std::array<int64_t, 3> kernel, std::array<int64_t, 3> stride, std::array<int64_t, 3> pad);

  int64_t in_voxels() const { return in[0] * in[1] * in[2]; }
  int64_t out_voxels() const { return out[0] * out[1] * out[2]; }
  int64_t kernel_voxels() const { return kernel[0] * kernel[1] * kernel[2]; }
  int64_t patch() const { return in_channels * kernel_voxels(); }
  bool pointwise() const;
  double flops() const { return 2.0 * double(batch) * double(out_channels) * double(patch()) * double(out_voxels()); }
};

namespace parallel {

/// C[m x n] (+)= op(A)[m x k] * op(B)[k x n], row-major with leading dims.
template <typename T>
void gemm(Trans ta, Trans tb, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb, T* c,
          int64_t ldc, bool accumulate);

template <typename T>
void conv3d_forward(const ConvShape& s, const T* x, const T* w, const T* bias, T* y);
template <typename T>
void conv3d_backward_input(const ConvShape& s, const T* dy, const T* w, T* dx);
template <typename T>
void conv3d_backward_weight(const ConvShape& s, const T* x, const T* dy, T* dw, T* dbias);

}  // namespace parallel

namespace serial {

template <typename T>
void gemm(Trans ta, Trans tb, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb, T* c,
          int64_t ldc, bool accumulate);

template <typename T>
void conv3d_forward(const ConvShape& s, const T* x, const T* w, const T* bias, T* y);
template <typename T>
void conv3d_backward_input(const ConvShape& s, const T* dy, const T* w, T* dx);
template <typename T>
void conv3d_backward_weight(const ConvShape& s, const T* x, const T* dy, T* dw, T* dbias);

}  // namespace serial

/// Worker count used by the parallel kernels (wraps omp_set_num_threads).
void set_num_threads(int n);
int num_threads();

}  // namespace voxscreen::kernels
