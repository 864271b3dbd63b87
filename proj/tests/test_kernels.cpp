#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "voxscreen/kernels.hpp"
#include "voxscreen/rng.hpp"

using namespace voxscreen;
using namespace voxscreen::kernels;

namespace {

template <typename T>
std::vector<T> random_vec(Rng& rng, int64_t n) {
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1, 1));
  return v;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
void check_gemm(Rng& rng, int64_t m, int64_t n, int64_t k, double tol) {
  for (Trans ta : {Trans::no, Trans::yes})
    for (Trans tb : {Trans::no, Trans::yes})
      for (bool acc : {false, true}) {
        const auto a = random_vec<T>(rng, m * k), b = random_vec<T>(rng, k * n);
        const int64_t lda = ta == Trans::no ? k : m, ldb = tb == Trans::no ? n : k;
        auto c1 = random_vec<T>(rng, m * n);
        auto c2 = c1;
        parallel::gemm<T>(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c1.data(), n, acc);
        serial::gemm<T>(ta, tb, m, n, k, a.data(), lda, b.data(), ldb, c2.data(), n, acc);
        CHECK(max_abs_diff(c1, c2) <= tol * double(k));
      }
}

template <typename T>
void check_conv(Rng& rng, ConvShape s, double tol) {
  const auto x = random_vec<T>(rng, s.batch * s.in_channels * s.in_voxels());
  const auto w = random_vec<T>(rng, s.out_channels * s.patch());
  const auto bias = random_vec<T>(rng, s.out_channels);
  const int64_t ny = s.batch * s.out_channels * s.out_voxels();
  std::vector<T> y1(ny), y2(ny);
  parallel::conv3d_forward(s, x.data(), w.data(), bias.data(), y1.data());
  serial::conv3d_forward(s, x.data(), w.data(), bias.data(), y2.data());
  CHECK(max_abs_diff(y1, y2) <= tol);

  const auto dy = random_vec<T>(rng, ny);
  auto dx1 = random_vec<T>(rng, static_cast<int64_t>(x.size()));
  auto dx2 = dx1;
  parallel::conv3d_backward_input(s, dy.data(), w.data(), dx1.data());
  serial::conv3d_backward_input(s, dy.data(), w.data(), dx2.data());
  CHECK(max_abs_diff(dx1, dx2) <= tol);

  auto dw1 = random_vec<T>(rng, static_cast<int64_t>(w.size()));
  auto dw2 = dw1;
  auto db1 = random_vec<T>(rng, s.out_channels);
  auto db2 = db1;
  parallel::conv3d_backward_weight(s, x.data(), dy.data(), dw1.data(), db1.data());
  serial::conv3d_backward_weight(s, x.data(), dy.data(), dw2.data(), db2.data());
  CHECK(max_abs_diff(dw1, dw2) <= tol * 10);
  CHECK(max_abs_diff(db1, db2) <= tol * 10);
}

}  // namespace

TEST_CASE("packed gemm agrees with the naive loop") {
  Rng rng(1);
  for (auto [m, n, k] : {std::array<int64_t, 3>{1, 1, 1}, {7, 5, 3}, {17, 33, 9}, {130, 70, 300}, {64, 2100, 40}}) {
    check_gemm<double>(rng, m, n, k, 1e-14);
    check_gemm<float>(rng, m, n, k, 1e-6);
  }
}

TEST_CASE("im2col convolution agrees with the direct reference") {
  Rng rng(2);
  const std::vector<ConvShape> shapes{
      ConvShape::make(1, 2, 3, {6, 6, 6}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}),
      ConvShape::make(1, 2, 4, {6, 5, 4}, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}),
      ConvShape::make(2, 3, 5, {5, 6, 7}, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}),
      ConvShape::make(2, 3, 2, {5, 6, 7}, {1, 1, 1}, {2, 2, 2}, {0, 0, 0}),
      ConvShape::make(1, 4, 8, {9, 9, 9}, {3, 2, 1}, {1, 2, 3}, {1, 0, 0}),
      ConvShape::make(1, 1, 1, {1, 1, 1}, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}),
  };
  for (const auto& s : shapes) {
    check_conv<double>(rng, s, 1e-12);
    check_conv<float>(rng, s, 1e-5);
  }
}

TEST_CASE("kernel results do not depend on the thread count") {
  Rng rng(3);
  const auto s = ConvShape::make(1, 8, 16, {12, 12, 12}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
  const auto x = random_vec<float>(rng, s.in_channels * s.in_voxels());
  const auto w = random_vec<float>(rng, s.out_channels * s.patch());
  std::vector<float> y1(s.out_channels * s.out_voxels()), y4(y1.size());
  const int saved = num_threads();
  set_num_threads(1);
  parallel::conv3d_forward<float>(s, x.data(), w.data(), nullptr, y1.data());
  set_num_threads(4);
  parallel::conv3d_forward<float>(s, x.data(), w.data(), nullptr, y4.data());
  set_num_threads(saved);
  CHECK(y1 == y4);
}

TEST_CASE("conv shape validation names the axis") {
  CHECK(ConvShape::make(2, 3, 8, {16, 16, 16}, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}).out == std::array<int64_t, 3>{8, 8, 8});
  try {
    ConvShape::make(1, 1, 1, {4, 2, 4}, {3, 3, 3}, {1, 1, 1}, {0, 0, 0});
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find('H') != std::string::npos);
  }
  CHECK_THROWS(ConvShape::make(1, 1, 1, {4, 4, 4}, {3, 3, 3}, {0, 1, 1}, {0, 0, 0}));
}
