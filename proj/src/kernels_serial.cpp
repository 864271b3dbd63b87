#include "voxscreen/kernels.hpp"

namespace voxscreen::kernels::serial {

template <typename T>
void gemm(Trans ta, Trans tb, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb, T* c,
          int64_t ldc, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T sum = 0;
      for (int64_t p = 0; p < k; ++p) {
        const T av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const T bv = tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p];
        sum += av * bv;
      }
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + sum : sum;
    }
  }
}

// Direct seven-loop cross-correlation: (n, o, oz, oy, ox) x (c, kz, ky, kx).
template <typename T>
void conv3d_forward(const ConvShape& s, const T* x, const T* w, const T* bias, T* y) {
  const auto [id, ih, iw] = s.in;
  const auto [od, oh, ow] = s.out;
  const auto [kd, kh, kw] = s.kernel;
  for (int64_t n = 0; n < s.batch; ++n)
    for (int64_t o = 0; o < s.out_channels; ++o)
      for (int64_t oz = 0; oz < od; ++oz)
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            T sum = bias ? bias[o] : T(0);
            for (int64_t c = 0; c < s.in_channels; ++c)
              for (int64_t kz = 0; kz < kd; ++kz)
                for (int64_t ky = 0; ky < kh; ++ky)
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t iz = oz * s.stride[0] - s.pad[0] + kz;
                    const int64_t iy = oy * s.stride[1] - s.pad[1] + ky;
                    const int64_t ix = ox * s.stride[2] - s.pad[2] + kx;
                    if (iz < 0 || iz >= id || iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
                    sum += x[(((n * s.in_channels + c) * id + iz) * ih + iy) * iw + ix] *
                           w[(((o * s.in_channels + c) * kd + kz) * kh + ky) * kw + kx];
                  }
            y[(((n * s.out_channels + o) * od + oz) * oh + oy) * ow + ox] = sum;
          }
}

template <typename T>
void conv3d_backward_input(const ConvShape& s, const T* dy, const T* w, T* dx) {
  const auto [id, ih, iw] = s.in;
  const auto [od, oh, ow] = s.out;
  const auto [kd, kh, kw] = s.kernel;
  for (int64_t n = 0; n < s.batch; ++n)
    for (int64_t o = 0; o < s.out_channels; ++o)
      for (int64_t oz = 0; oz < od; ++oz)
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            const T g = dy[(((n * s.out_channels + o) * od + oz) * oh + oy) * ow + ox];
            for (int64_t c = 0; c < s.in_channels; ++c)
              for (int64_t kz = 0; kz < kd; ++kz)
                for (int64_t ky = 0; ky < kh; ++ky)
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t iz = oz * s.stride[0] - s.pad[0] + kz;
                    const int64_t iy = oy * s.stride[1] - s.pad[1] + ky;
                    const int64_t ix = ox * s.stride[2] - s.pad[2] + kx;
                    if (iz < 0 || iz >= id || iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
                    dx[(((n * s.in_channels + c) * id + iz) * ih + iy) * iw + ix] +=
                        g * w[(((o * s.in_channels + c) * kd + kz) * kh + ky) * kw + kx];
                  }
          }
}

template <typename T>
void conv3d_backward_weight(const ConvShape& s, const T* x, const T* dy, T* dw, T* dbias) {
  const auto [id, ih, iw] = s.in;
  const auto [od, oh, ow] = s.out;
  const auto [kd, kh, kw] = s.kernel;
  for (int64_t n = 0; n < s.batch; ++n)
    for (int64_t o = 0; o < s.out_channels; ++o)
      for (int64_t oz = 0; oz < od; ++oz)
        for (int64_t oy = 0; oy < oh; ++oy)
          for (int64_t ox = 0; ox < ow; ++ox) {
            const T g = dy[(((n * s.out_channels + o) * od + oz) * oh + oy) * ow + ox];
            if (dbias) dbias[o] += g;
            for (int64_t c = 0; c < s.in_channels; ++c)
              for (int64_t kz = 0; kz < kd; ++kz)
                for (int64_t ky = 0; ky < kh; ++ky)
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t iz = oz * s.stride[0] - s.pad[0] + kz;
                    const int64_t iy = oy * s.stride[1] - s.pad[1] + ky;
                    const int64_t ix = ox * s.stride[2] - s.pad[2] + kx;
                    if (iz < 0 || iz >= id || iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
                    dw[(((o * s.in_channels + c) * kd + kz) * kh + ky) * kw + kx] +=
                        g * x[(((n * s.in_channels + c) * id + iz) * ih + iy) * iw + ix];
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

}  // namespace voxscreen::kernels::serial
