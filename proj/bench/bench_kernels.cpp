// Serial reference vs parallel kernels on shapes typical of the desk-scale
// backbones.

#include <benchmark/benchmark.h>

#include <vector>

#include "voxscreen/kernels.hpp"
#include "voxscreen/rng.hpp"

using namespace voxscreen;
using namespace voxscreen::kernels;

namespace {

std::vector<float> random_vec(int64_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const int64_t n = state.range(0);
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(static_cast<size_t>(n * n));
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::gemm<float>(Trans::no, Trans::no, n, n, n, a.data(), n, b.data(), n, c.data(), n, false);
    } else {
      serial::gemm<float>(Trans::no, Trans::no, n, n, n, a.data(), n, b.data(), n, c.data(), n, false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * double(n * n * n), benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

// args: channels, spatial extent
ConvShape shape_of(const benchmark::State& state) {
  const int64_t c = state.range(0), d = state.range(1);
  return ConvShape::make(1, c, c, {d, d, d}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
  const ConvShape s = shape_of(state);
  const auto x = random_vec(s.in_channels * s.in_voxels(), 3), w = random_vec(s.out_channels * s.patch(), 4);
  std::vector<float> y(static_cast<size_t>(s.out_channels * s.out_voxels()));
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::conv3d_forward<float>(s, x.data(), w.data(), nullptr, y.data());
    } else {
      serial::conv3d_forward<float>(s, x.data(), w.data(), nullptr, y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(s.flops(), benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& state) {
  const ConvShape s = shape_of(state);
  const auto x = random_vec(s.in_channels * s.in_voxels(), 5), w = random_vec(s.out_channels * s.patch(), 6);
  const auto dy = random_vec(s.out_channels * s.out_voxels(), 7);
  std::vector<float> dx(x.size()), dw(w.size());
  for (auto _ : state) {
    if constexpr (Parallel) {
      parallel::conv3d_backward_input<float>(s, dy.data(), w.data(), dx.data());
      parallel::conv3d_backward_weight<float>(s, x.data(), dy.data(), dw.data(), nullptr);
    } else {
      serial::conv3d_backward_input<float>(s, dy.data(), w.data(), dx.data());
      serial::conv3d_backward_weight<float>(s, x.data(), dy.data(), dw.data(), nullptr);
    }
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2 * s.flops(), benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_ConvForward<false>)->Name("conv3d_fwd/serial")->Args({16, 16})->Args({32, 12});
BENCHMARK(BM_ConvForward<true>)->Name("conv3d_fwd/parallel")->Args({16, 16})->Args({32, 12})->Args({64, 8});
BENCHMARK(BM_ConvBackward<false>)->Name("conv3d_bwd/serial")->Args({16, 16});
BENCHMARK(BM_ConvBackward<true>)->Name("conv3d_bwd/parallel")->Args({16, 16})->Args({32, 12});

BENCHMARK_MAIN();
