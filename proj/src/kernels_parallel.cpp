#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <vector>

#include <omp.h>

#include "voxscreen/kernels.hpp"

namespace voxscreen::kernels {

ConvShape ConvShape::make(int64_t batch, int64_t in_channels, int64_t out_channels, std::array<int64_t, 3> in,
                          std::array<int64_t, 3> kernel, std::array<int64_t, 3> stride, std::array<int64_t, 3> pad) {
  static constexpr const char* kAxis[3] = {"D", "H", "W"};
  ConvShape s;
  s.batch = batch;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.in = in;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  if (batch < 1 || in_channels < 1 || out_channels < 1) {
    throw std::invalid_argument("conv3d: batch and channel counts must be positive");
  }
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) throw std::invalid_argument(std::string("conv3d: stride on ") + kAxis[a] + " must be >= 1");
    if (pad[a] < 0) throw std::invalid_argument(std::string("conv3d: padding on ") + kAxis[a] + " is negative");
    const int64_t padded = in[a] + 2 * pad[a];
    if (kernel[a] < 1 || kernel[a] > padded) {
      throw std::invalid_argument(std::string("conv3d: kernel extent ") + std::to_string(kernel[a]) + " on " +
                                  kAxis[a] + " does not fit padded input " + std::to_string(padded));
    }
    s.out[a] = (padded - kernel[a]) / stride[a] + 1;
  }
  return s;
}

bool ConvShape::pointwise() const {
  return kernel == std::array<int64_t, 3>{1, 1, 1} && stride == std::array<int64_t, 3>{1, 1, 1} &&
         pad == std::array<int64_t, 3>{0, 0, 0};
}

void set_num_threads(int n) { omp_set_num_threads(std::max(1, n)); }
int num_threads() { return omp_get_max_threads(); }

namespace parallel {

namespace {

template <typename T>
struct Tile;
template <>
struct Tile<float> {
  static constexpr int64_t mr = 8, nr = 32;
};
template <>
struct Tile<double> {
  static constexpr int64_t mr = 8, nr = 16;
};

constexpr int64_t kKc = 256;
constexpr int64_t kMc = 128;
constexpr int64_t kNc = 2048;

template <typename T>
inline void micro_kernel(int64_t kc, const T* __restrict a, const T* __restrict b, T* __restrict c, int64_t ldc,
                         int64_t mr, int64_t nr, bool accumulate) {
  constexpr int64_t MR = Tile<T>::mr, NR = Tile<T>::nr;
  T acc[MR][NR] = {};
  for (int64_t p = 0; p < kc; ++p) {
    const T* bp = b + p * NR;
    const T* ap = a + p * MR;
#pragma GCC unroll 8
    for (int64_t i = 0; i < MR; ++i) {
      const T ai = ap[i];
#pragma omp simd
      for (int64_t j = 0; j < NR; ++j) acc[i][j] += ai * bp[j];
    }
  }
  if (accumulate) {
    for (int64_t i = 0; i < mr; ++i)
      for (int64_t j = 0; j < nr; ++j) c[i * ldc + j] += acc[i][j];
  } else {
    for (int64_t i = 0; i < mr; ++i)
      for (int64_t j = 0; j < nr; ++j) c[i * ldc + j] = acc[i][j];
  }
}

template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buffers[3];
  return buffers[slot];
}

}  // namespace

template <typename T>
void gemm(Trans ta, Trans tb, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb, T* c,
          int64_t ldc, bool accumulate) {
  constexpr int64_t MR = Tile<T>::mr, NR = Tile<T>::nr;
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate)
      for (int64_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, T(0));
    return;
  }
  auto a_at = [&](int64_t i, int64_t p) { return ta == Trans::no ? a[i * lda + p] : a[p * lda + i]; };
  auto b_at = [&](int64_t p, int64_t j) { return tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p]; };

  std::vector<T>& pa = scratch<T>(0);
  std::vector<T>& pb = scratch<T>(1);
  pa.resize(static_cast<size_t>(((kMc + MR - 1) / MR) * MR * kKc));
  pb.resize(static_cast<size_t>(((kNc + NR - 1) / NR) * NR * kKc));
  const bool go_parallel = double(m) * double(n) * double(k) > 1 << 18 && omp_get_max_threads() > 1;

  for (int64_t jc = 0; jc < n; jc += kNc) {
    const int64_t nc = std::min(kNc, n - jc);
    const int64_t n_panels = (nc + NR - 1) / NR;
    for (int64_t pc = 0; pc < k; pc += kKc) {
      const int64_t kc = std::min(kKc, k - pc);
      const bool acc = accumulate || pc > 0;
      T* pbd = pb.data();
#pragma omp parallel for schedule(static) if (go_parallel)
      for (int64_t jp = 0; jp < n_panels; ++jp) {
        const int64_t jr = jp * NR;
        const int64_t nr = std::min(NR, nc - jr);
        T* dst = pbd + jr * kc;
        for (int64_t p = 0; p < kc; ++p) {
          int64_t j = 0;
          if (tb == Trans::no) {
            const T* src = b + (pc + p) * ldb + jc + jr;
            for (; j < nr; ++j) dst[p * NR + j] = src[j];
          } else {
            for (; j < nr; ++j) dst[p * NR + j] = b_at(pc + p, jc + jr + j);
          }
          for (; j < NR; ++j) dst[p * NR + j] = T(0);
        }
      }
      for (int64_t ic = 0; ic < m; ic += kMc) {
        const int64_t mc = std::min(kMc, m - ic);
        const int64_t m_panels = (mc + MR - 1) / MR;
        T* pad = pa.data();
        for (int64_t ip = 0; ip < m_panels; ++ip) {
          const int64_t ir = ip * MR;
          const int64_t mr = std::min(MR, mc - ir);
          T* dst = pad + ir * kc;
          for (int64_t p = 0; p < kc; ++p) {
            int64_t i = 0;
            for (; i < mr; ++i) dst[p * MR + i] = a_at(ic + ir + i, pc + p);
            for (; i < MR; ++i) dst[p * MR + i] = T(0);
          }
        }
#pragma omp parallel for collapse(2) schedule(static) if (go_parallel)
        for (int64_t jp = 0; jp < n_panels; ++jp) {
          for (int64_t ip = 0; ip < m_panels; ++ip) {
            const int64_t jr = jp * NR, ir = ip * MR;
            micro_kernel<T>(kc, pad + ir * kc, pbd + jr * kc, c + (ic + ir) * ldc + jc + jr, ldc,
                            std::min(MR, mc - ir), std::min(NR, nc - jr), acc);
          }
        }
      }
    }
  }
}

namespace {

// col[(c, kz, ky, kx), (oz, oy, ox)] = x[c, oz*sz - pz + kz, ...] or 0 outside.
template <typename T>
void im2col(const ConvShape& s, const T* x, T* col) {
  const auto [kd, kh, kw] = s.kernel;
  const auto [od, oh, ow] = s.out;
  const auto [id, ih, iw] = s.in;
  const int64_t ov = s.out_voxels();
  const int64_t rows = s.patch();
#pragma omp parallel for schedule(static) if (rows * ov > 1 << 15)
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t kx = r % kw;
    const int64_t ky = (r / kw) % kh;
    const int64_t kz = (r / (kw * kh)) % kd;
    const int64_t c = r / (kw * kh * kd);
    const T* xc = x + c * s.in_voxels();
    T* dst = col + r * ov;
    for (int64_t oz = 0; oz < od; ++oz) {
      const int64_t iz = oz * s.stride[0] - s.pad[0] + kz;
      for (int64_t oy = 0; oy < oh; ++oy) {
        const int64_t iy = oy * s.stride[1] - s.pad[1] + ky;
        T* row = dst + (oz * oh + oy) * ow;
        if (iz < 0 || iz >= id || iy < 0 || iy >= ih) {
          std::fill_n(row, ow, T(0));
          continue;
        }
        const T* src = xc + (iz * ih + iy) * iw;
        for (int64_t ox = 0; ox < ow; ++ox) {
          const int64_t ix = ox * s.stride[2] - s.pad[2] + kx;
          row[ox] = (ix >= 0 && ix < iw) ? src[ix] : T(0);
        }
      }
    }
  }
}

// Inverse scatter of im2col, accumulating into dx. Channels are independent,
// so the channel loop is the parallel one.
template <typename T>
void col2im(const ConvShape& s, const T* col, T* dx) {
  const auto [kd, kh, kw] = s.kernel;
  const auto [od, oh, ow] = s.out;
  const auto [id, ih, iw] = s.in;
  const int64_t ov = s.out_voxels();
  const int64_t kv = s.kernel_voxels();
#pragma omp parallel for schedule(static) if (s.patch() * ov > 1 << 15)
  for (int64_t c = 0; c < s.in_channels; ++c) {
    T* dxc = dx + c * s.in_voxels();
    for (int64_t kr = 0; kr < kv; ++kr) {
      const int64_t kx = kr % kw;
      const int64_t ky = (kr / kw) % kh;
      const int64_t kz = kr / (kw * kh);
      const T* src = col + (c * kv + kr) * ov;
      for (int64_t oz = 0; oz < od; ++oz) {
        const int64_t iz = oz * s.stride[0] - s.pad[0] + kz;
        if (iz < 0 || iz >= id) continue;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * s.stride[1] - s.pad[1] + ky;
          if (iy < 0 || iy >= ih) continue;
          const T* row = src + (oz * oh + oy) * ow;
          T* dst = dxc + (iz * ih + iy) * iw;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * s.stride[2] - s.pad[2] + kx;
            if (ix >= 0 && ix < iw) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv3d_forward(const ConvShape& s, const T* x, const T* w, const T* bias, T* y) {
  const int64_t ov = s.out_voxels();
  const int64_t patch = s.patch();
  std::vector<T>& col = scratch<T>(2);
  for (int64_t n = 0; n < s.batch; ++n) {
    const T* xn = x + n * s.in_channels * s.in_voxels();
    T* yn = y + n * s.out_channels * ov;
    const T* cols = xn;
    if (!s.pointwise()) {
      col.resize(static_cast<size_t>(patch * ov));
      im2col(s, xn, col.data());
      cols = col.data();
    }
    gemm<T>(Trans::no, Trans::no, s.out_channels, ov, patch, w, patch, cols, ov, yn, ov, false);
    if (bias) {
      for (int64_t o = 0; o < s.out_channels; ++o) {
        T* row = yn + o * ov;
        const T b = bias[o];
        for (int64_t v = 0; v < ov; ++v) row[v] += b;
      }
    }
  }
}

template <typename T>
void conv3d_backward_input(const ConvShape& s, const T* dy, const T* w, T* dx) {
  const int64_t ov = s.out_voxels();
  const int64_t patch = s.patch();
  std::vector<T>& col = scratch<T>(2);
  for (int64_t n = 0; n < s.batch; ++n) {
    const T* dyn = dy + n * s.out_channels * ov;
    T* dxn = dx + n * s.in_channels * s.in_voxels();
    if (s.pointwise()) {
      gemm<T>(Trans::yes, Trans::no, patch, ov, s.out_channels, w, patch, dyn, ov, dxn, ov, true);
      continue;
    }
    col.resize(static_cast<size_t>(patch * ov));
    gemm<T>(Trans::yes, Trans::no, patch, ov, s.out_channels, w, patch, dyn, ov, col.data(), ov, false);
    col2im(s, col.data(), dxn);
  }
}

template <typename T>
void conv3d_backward_weight(const ConvShape& s, const T* x, const T* dy, T* dw, T* dbias) {
  const int64_t ov = s.out_voxels();
  const int64_t patch = s.patch();
  std::vector<T>& col = scratch<T>(2);
  for (int64_t n = 0; n < s.batch; ++n) {
    const T* xn = x + n * s.in_channels * s.in_voxels();
    const T* dyn = dy + n * s.out_channels * ov;
    const T* cols = xn;
    if (!s.pointwise()) {
      col.resize(static_cast<size_t>(patch * ov));
      im2col(s, xn, col.data());
      cols = col.data();
    }
    gemm<T>(Trans::no, Trans::yes, s.out_channels, patch, ov, dyn, ov, cols, ov, dw, patch, true);
    if (dbias) {
      for (int64_t o = 0; o < s.out_channels; ++o) {
        double sum = 0.0;
        const T* row = dyn + o * ov;
        for (int64_t v = 0; v < ov; ++v) sum += row[v];
        dbias[o] += static_cast<T>(sum);
      }
    }
  }
}

#define VOXSCREEN_INSTANTIATE(T)                                                                                     \
  template void gemm<T>(Trans, Trans, int64_t, int64_t, int64_t, const T*, int64_t, const T*, int64_t, T*, int64_t, \
                        bool);                                                                                       \
  template void conv3d_forward<T>(const ConvShape&, const T*, const T*, const T*, T*);                               \
  template void conv3d_backward_input<T>(const ConvShape&, const T*, const T*, T*);                                  \
  template void conv3d_backward_weight<T>(const ConvShape&, const T*, const T*, T*, T*);

VOXSCREEN_INSTANTIATE(float)
VOXSCREEN_INSTANTIATE(double)
#undef VOXSCREEN_INSTANTIATE

}  // namespace parallel
}  // namespace voxscreen::kernels
