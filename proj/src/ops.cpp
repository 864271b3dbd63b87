#include "voxscreen/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "voxscreen/kernels.hpp"

namespace voxscreen::nn {

namespace {

template <typename T>
void require_rank(const Tensor<T>& x, int rank, const char* op) {
  if (!x.defined()) throw std::invalid_argument(std::string(op) + ": undefined input");
  if (x.ndim() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got shape " +
                                shape_string(x.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

struct Bins {
  std::vector<int64_t> start, end;
};

Bins adaptive_bins(int64_t n, int64_t o) {
  Bins b;
  for (int64_t i = 0; i < o; ++i) {
    b.start.push_back((i * n) / o);
    b.end.push_back(((i + 1) * n + o - 1) / o);
  }
  return b;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node<T>& node) {
    const T* g = node.grad.data();
    const size_t n = node.grad.size();
    for (const Tensor<T>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      T* gt = t->node()->grad_buffer();
      for (size_t i = 0; i < n; ++i) gt[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  const T f = static_cast<T>(factor);
  for (auto& v : out) v *= f;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [x, f](detail::Node<T>& node) {
    T* gx = x.node()->grad_buffer();
    for (size_t i = 0; i < node.grad.size(); ++i) gx[i] += f * node.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0.0;
  for (T v : x.values()) s += v;
  return Tensor<T>::make_result(Shape{}, {static_cast<T>(s)}, {x}, [x](detail::Node<T>& node) {
    T* gx = x.node()->grad_buffer();
    const T g = node.grad[0];
    for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> w) {
  if (static_cast<int64_t>(w.size()) != x.numel()) throw std::invalid_argument("weighted_sum: weight size mismatch");
  double s = 0.0;
  const T* px = x.data();
  for (size_t i = 0; i < w.size(); ++i) s += double(px[i]) * double(w[i]);
  std::vector<T> wc(w.begin(), w.end());
  return Tensor<T>::make_result(Shape{}, {static_cast<T>(s)}, {x}, [x, wc](detail::Node<T>& node) {
    T* gx = x.node()->grad_buffer();
    const T g = node.grad[0];
    for (size_t i = 0; i < wc.size(); ++i) gx[i] += g * wc[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [x](detail::Node<T>& node) {
    T* gx = x.node()->grad_buffer();
    const T* px = x.data();
    for (size_t i = 0; i < node.grad.size(); ++i) gx[i] += px[i] > T(0) ? node.grad[i] : T(0);
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-px[i]));
  auto result = Tensor<T>::make_result(x.shape(), std::move(out), {x}, [x](detail::Node<T>& node) {
    T* gx = x.node()->grad_buffer();
    const T* y = node.value.data();
    for (size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i] * y[i] * (T(1) - y[i]);
  });
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {x}, [x](detail::Node<T>& node) {
    T* gx = x.node()->grad_buffer();
    for (size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (ref.size() < 2) throw std::invalid_argument("concat: inputs need rank >= 2");
  int64_t channels = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = ref;
    if (a.size() != b.size()) throw std::invalid_argument("concat: rank mismatch");
    a[1] = b[1] = 0;
    if (a != b) {
      throw std::invalid_argument("concat: non-channel dims differ: " + shape_string(p.shape()) + " vs " +
                                  shape_string(ref));
    }
    channels += p.dim(1);
  }
  const int64_t outer = ref[0];
  int64_t inner = 1;
  for (size_t i = 2; i < ref.size(); ++i) inner *= ref[i];
  Shape shape = ref;
  shape[1] = channels;
  std::vector<T> out(static_cast<size_t>(outer * channels * inner));
  int64_t offset = 0;
  std::vector<int64_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const int64_t chunk = p.dim(1) * inner;
    for (int64_t n = 0; n < outer; ++n) {
      std::copy_n(p.data() + n * chunk, chunk, out.data() + n * channels * inner + offset);
    }
    offset += chunk;
  }
  return Tensor<T>::make_result(shape, std::move(out), parts, [parts, offsets, outer, channels,
                                                               inner](detail::Node<T>& node) {
    for (size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      const int64_t chunk = parts[k].dim(1) * inner;
      T* gp = parts[k].node()->grad_buffer();
      for (int64_t n = 0; n < outer; ++n) {
        const T* src = node.grad.data() + n * channels * inner + offsets[k];
        for (int64_t i = 0; i < chunk; ++i) gp[n * chunk + i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Int3 stride, Int3 padding) {
  require_rank(input, 5, "conv3d");
  require_rank(weight, 5, "conv3d weight");
  if (weight.dim(1) != input.dim(1)) {
    throw std::invalid_argument("conv3d: weight expects " + std::to_string(weight.dim(1)) +
                                " input channels but input " + shape_string(input.shape()) + " has " +
                                std::to_string(input.dim(1)));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))) {
    throw std::invalid_argument("conv3d: bias shape " + shape_string(bias.shape()) + " does not match " +
                                std::to_string(weight.dim(0)) + " output channels");
  }
  const auto s = kernels::ConvShape::make(input.dim(0), input.dim(1), weight.dim(0),
                                          {input.dim(2), input.dim(3), input.dim(4)},
                                          {weight.dim(2), weight.dim(3), weight.dim(4)}, stride, padding);
  std::vector<T> out(static_cast<size_t>(s.batch * s.out_channels * s.out_voxels()));
  kernels::parallel::conv3d_forward(s, input.data(), weight.data(), bias.defined() ? bias.data() : nullptr,
                                    out.data());
  Shape shape{s.batch, s.out_channels, s.out[0], s.out[1], s.out[2]};
  return Tensor<T>::make_result(shape, std::move(out), {input, weight, bias},
                                [input, weight, bias, s](detail::Node<T>& node) {
                                  const T* dy = node.grad.data();
                                  if (input.requires_grad()) {
                                    kernels::parallel::conv3d_backward_input(s, dy, weight.data(),
                                                                             input.node()->grad_buffer());
                                  }
                                  const bool db = bias.defined() && bias.requires_grad();
                                  if (weight.requires_grad()) {
                                    kernels::parallel::conv3d_backward_weight(
                                        s, input.data(), dy, weight.node()->grad_buffer(),
                                        db ? bias.node()->grad_buffer() : nullptr);
                                  } else if (db) {
                                    T* gb = bias.node()->grad_buffer();
                                    const int64_t ov = s.out_voxels();
                                    for (int64_t n = 0; n < s.batch; ++n)
                                      for (int64_t o = 0; o < s.out_channels; ++o) {
                                        double acc = 0.0;
                                        for (int64_t v = 0; v < ov; ++v) acc += dy[(n * s.out_channels + o) * ov + v];
                                        gb[o] += static_cast<T>(acc);
                                      }
                                  }
                                });
}

template <typename T>
Tensor<T> adaptive_avg_pool3d(const Tensor<T>& input, Int3 out_dims) {
  require_rank(input, 5, "adaptive_avg_pool3d");
  for (int64_t o : out_dims) {
    if (o < 1) throw std::invalid_argument("adaptive_avg_pool3d: output dims must be >= 1");
  }
  const int64_t nc = input.dim(0) * input.dim(1);
  const int64_t D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const auto [od, oh, ow] = out_dims;
  const Bins bz = adaptive_bins(D, od), by = adaptive_bins(H, oh), bx = adaptive_bins(W, ow);
  std::vector<T> out(static_cast<size_t>(nc * od * oh * ow));
  const T* px = input.data();
  for (int64_t c = 0; c < nc; ++c) {
    const T* src = px + c * D * H * W;
    for (int64_t i = 0; i < od; ++i)
      for (int64_t j = 0; j < oh; ++j)
        for (int64_t k = 0; k < ow; ++k) {
          double acc = 0.0;
          for (int64_t z = bz.start[i]; z < bz.end[i]; ++z)
            for (int64_t y = by.start[j]; y < by.end[j]; ++y)
              for (int64_t x = bx.start[k]; x < bx.end[k]; ++x) acc += src[(z * H + y) * W + x];
          const double count = double((bz.end[i] - bz.start[i]) * (by.end[j] - by.start[j]) * (bx.end[k] - bx.start[k]));
          out[((c * od + i) * oh + j) * ow + k] = static_cast<T>(acc / count);
        }
  }
  Shape shape{input.dim(0), input.dim(1), od, oh, ow};
  return Tensor<T>::make_result(shape, std::move(out), {input}, [input, bz, by, bx, nc, D, H, W, od, oh,
                                                                 ow](detail::Node<T>& node) {
    T* gx = input.node()->grad_buffer();
    for (int64_t c = 0; c < nc; ++c) {
      T* dst = gx + c * D * H * W;
      for (int64_t i = 0; i < od; ++i)
        for (int64_t j = 0; j < oh; ++j)
          for (int64_t k = 0; k < ow; ++k) {
            const double count =
                double((bz.end[i] - bz.start[i]) * (by.end[j] - by.start[j]) * (bx.end[k] - bx.start[k]));
            const T g = static_cast<T>(node.grad[((c * od + i) * oh + j) * ow + k] / count);
            for (int64_t z = bz.start[i]; z < bz.end[i]; ++z)
              for (int64_t y = by.start[j]; y < by.end[j]; ++y)
                for (int64_t x = bx.start[k]; x < bx.end[k]; ++x) dst[(z * H + y) * W + x] += g;
          }
    }
  });
}

namespace {

// Shared normalisation core. Elements of group g are gathered by `visit`,
// which calls f(flat_index, channel) for each member. Statistics in double.
template <typename T, typename Visit>
void normalize_groups(int64_t n_groups, Visit&& visit, const T* x, T* xhat, std::vector<double>& inv_std,
                      std::vector<double>& means, std::vector<double>& vars, std::vector<int64_t>& counts,
                      double eps) {
  inv_std.assign(static_cast<size_t>(n_groups), 0.0);
  means.assign(static_cast<size_t>(n_groups), 0.0);
  vars.assign(static_cast<size_t>(n_groups), 0.0);
  counts.assign(static_cast<size_t>(n_groups), 0);
#pragma omp parallel for schedule(static) if (n_groups > 1)
  for (int64_t g = 0; g < n_groups; ++g) {
    double s = 0.0;
    int64_t count = 0;
    visit(g, [&](int64_t i, int64_t) {
      s += x[i];
      ++count;
    });
    const double m = s / double(count);
    double ss = 0.0;
    visit(g, [&](int64_t i, int64_t) {
      const double d = x[i] - m;
      ss += d * d;
    });
    const double var = ss / double(count);
    const double is = 1.0 / std::sqrt(var + eps);
    visit(g, [&](int64_t i, int64_t) { xhat[i] = static_cast<T>((x[i] - m) * is); });
    means[g] = m;
    vars[g] = var;
    inv_std[g] = is;
    counts[g] = count;
  }
}

}  // namespace

template <typename T>
Tensor<T> batch_norm3d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training, double momentum, double eps) {
  require_rank(input, 5, "batch_norm3d");
  const int64_t N = input.dim(0), C = input.dim(1);
  const int64_t S = input.dim(2) * input.dim(3) * input.dim(4);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->numel() != C) throw std::invalid_argument("batch_norm3d: per-channel parameter size mismatch");
  }
  const T* x = input.data();
  std::vector<T> xhat(static_cast<size_t>(input.numel()));
  std::vector<double> inv_std(static_cast<size_t>(C));
  if (training) {
    if (N * S == 1) {
      throw std::invalid_argument("batch_norm3d: training mode needs more than one value per channel (N*D*H*W = 1)");
    }
    std::vector<double> means, vars;
    std::vector<int64_t> counts;
    auto visit = [&](int64_t c, auto&& f) {
      for (int64_t n = 0; n < N; ++n) {
        const int64_t base = (n * C + c) * S;
        for (int64_t s = 0; s < S; ++s) f(base + s, c);
      }
    };
    normalize_groups<T>(C, visit, x, xhat.data(), inv_std, means, vars, counts, eps);
    T* rm = running_mean.data();
    T* rv = running_var.data();
    const double unbias = double(N * S) / double(N * S - 1);
    for (int64_t c = 0; c < C; ++c) {
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * means[c]);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * vars[c] * unbias);
    }
  } else {
    const T* rm = running_mean.data();
    const T* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(double(rv[c]) + eps);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const int64_t base = (n * C + c) * S;
        for (int64_t s = 0; s < S; ++s) xhat[base + s] = static_cast<T>((x[base + s] - rm[c]) * inv_std[c]);
      }
  }
  std::vector<T> out(xhat.size());
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const int64_t base = (n * C + c) * S;
      for (int64_t s = 0; s < S; ++s) out[base + s] = xhat[base + s] * pg[c] + pb[c];
    }
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [input, gamma, beta, xhat = std::move(xhat), inv_std, training, N, C, S](detail::Node<T>& node) {
        const T* dy = node.grad.data();
        const T* pg = gamma.data();
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const int64_t base = (n * C + c) * S;
            for (int64_t s = 0; s < S; ++s) {
              sum_dy[c] += dy[base + s];
              sum_dy_xhat[c] += double(dy[base + s]) * xhat[base + s];
            }
          }
        if (gamma.requires_grad()) {
          T* gg = gamma.node()->grad_buffer();
          for (int64_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (beta.requires_grad()) {
          T* gb = beta.node()->grad_buffer();
          for (int64_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[c]);
        }
        if (!input.requires_grad()) return;
        T* gx = input.node()->grad_buffer();
        const double m = double(N * S);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const int64_t base = (n * C + c) * S;
            const double k = double(pg[c]) * inv_std[c];
            if (training) {
              const double mdy = sum_dy[c] / m, mdyx = sum_dy_xhat[c] / m;
              for (int64_t s = 0; s < S; ++s)
                gx[base + s] += static_cast<T>(k * (dy[base + s] - mdy - xhat[base + s] * mdyx));
            } else {
              for (int64_t s = 0; s < S; ++s) gx[base + s] += static_cast<T>(k * dy[base + s]);
            }
          }
      });
}

template <typename T>
Tensor<T> group_norm3d(const Tensor<T>& input, int64_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                       double eps) {
  require_rank(input, 5, "group_norm3d");
  const int64_t N = input.dim(0), C = input.dim(1);
  const int64_t S = input.dim(2) * input.dim(3) * input.dim(4);
  if (groups < 1 || C % groups != 0) {
    throw std::invalid_argument("group_norm3d: " + std::to_string(C) + " channels do not split into " +
                                std::to_string(groups) + " groups");
  }
  if (gamma.numel() != C || beta.numel() != C) throw std::invalid_argument("group_norm3d: affine size mismatch");
  const int64_t cpg = C / groups;
  if (cpg * S == 1) throw std::invalid_argument("group_norm3d: a group holds a single value (undefined variance)");
  const T* x = input.data();
  std::vector<T> xhat(static_cast<size_t>(input.numel()));
  std::vector<double> inv_std, means, vars;
  std::vector<int64_t> counts;
  // group index g = n * groups + k covers channels [k*cpg, (k+1)*cpg) of sample n, a contiguous span.
  auto visit = [&](int64_t g, auto&& f) {
    const int64_t base = g * cpg * S;
    for (int64_t i = 0; i < cpg * S; ++i) f(base + i, 0);
  };
  normalize_groups<T>(N * groups, visit, x, xhat.data(), inv_std, means, vars, counts, eps);
  std::vector<T> out(xhat.size());
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const int64_t base = (n * C + c) * S;
      for (int64_t s = 0; s < S; ++s) out[base + s] = xhat[base + s] * pg[c] + pb[c];
    }
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [input, gamma, beta, xhat = std::move(xhat), inv_std, N, C, S, groups, cpg](detail::Node<T>& node) {
        const T* dy = node.grad.data();
        const T* pg = gamma.data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          T* gg = gamma.requires_grad() ? gamma.node()->grad_buffer() : nullptr;
          T* gb = beta.requires_grad() ? beta.node()->grad_buffer() : nullptr;
          for (int64_t c = 0; c < C; ++c) {
            double sdy = 0.0, sdyx = 0.0;
            for (int64_t n = 0; n < N; ++n) {
              const int64_t base = (n * C + c) * S;
              for (int64_t s = 0; s < S; ++s) {
                sdy += dy[base + s];
                sdyx += double(dy[base + s]) * xhat[base + s];
              }
            }
            if (gg) gg[c] += static_cast<T>(sdyx);
            if (gb) gb[c] += static_cast<T>(sdy);
          }
        }
        if (!input.requires_grad()) return;
        T* gx = input.node()->grad_buffer();
        const double m = double(cpg * S);
#pragma omp parallel for schedule(static) if (N * groups > 1)
        for (int64_t g = 0; g < N * groups; ++g) {
          const int64_t n = g / groups, k = g % groups;
          double sum_dxh = 0.0, sum_dxh_xhat = 0.0;
          for (int64_t c = k * cpg; c < (k + 1) * cpg; ++c) {
            const int64_t base = (n * C + c) * S;
            for (int64_t s = 0; s < S; ++s) {
              const double dxh = double(dy[base + s]) * pg[c];
              sum_dxh += dxh;
              sum_dxh_xhat += dxh * xhat[base + s];
            }
          }
          const double mdxh = sum_dxh / m, mdxhx = sum_dxh_xhat / m;
          for (int64_t c = k * cpg; c < (k + 1) * cpg; ++c) {
            const int64_t base = (n * C + c) * S;
            for (int64_t s = 0; s < S; ++s) {
              const double dxh = double(dy[base + s]) * pg[c];
              gx[base + s] += static_cast<T>(inv_std[g] * (dxh - mdxh - xhat[base + s] * mdxhx));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int64_t N = input.dim(0), in = input.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw std::invalid_argument("linear: weight " + shape_string(weight.shape()) + " does not accept input " +
                                shape_string(input.shape()));
  }
  if (bias.defined() && bias.numel() != out_f) throw std::invalid_argument("linear: bias size mismatch");
  std::vector<T> out(static_cast<size_t>(N * out_f));
  kernels::parallel::gemm<T>(kernels::Trans::no, kernels::Trans::yes, N, out_f, in, input.data(), in, weight.data(),
                             in, out.data(), out_f, false);
  if (bias.defined()) {
    for (int64_t n = 0; n < N; ++n)
      for (int64_t o = 0; o < out_f; ++o) out[n * out_f + o] += bias.data()[o];
  }
  return Tensor<T>::make_result(Shape{N, out_f}, std::move(out), {input, weight, bias},
                                [input, weight, bias, N, in, out_f](detail::Node<T>& node) {
                                  const T* dy = node.grad.data();
                                  using kernels::Trans;
                                  if (input.requires_grad()) {
                                    kernels::parallel::gemm<T>(Trans::no, Trans::no, N, in, out_f, dy, out_f,
                                                               weight.data(), in, input.node()->grad_buffer(), in,
                                                               true);
                                  }
                                  if (weight.requires_grad()) {
                                    kernels::parallel::gemm<T>(Trans::yes, Trans::no, out_f, in, N, dy, out_f,
                                                               input.data(), in, weight.node()->grad_buffer(), in,
                                                               true);
                                  }
                                  if (bias.defined() && bias.requires_grad()) {
                                    T* gb = bias.node()->grad_buffer();
                                    for (int64_t n = 0; n < N; ++n)
                                      for (int64_t o = 0; o < out_f; ++o) gb[o] += dy[n * out_f + o];
                                  }
                                });
}

template <typename T>
Tensor<T> upsample_nearest3d(const Tensor<T>& input, Int3 target) {
  require_rank(input, 5, "upsample_nearest3d");
  const int64_t nc = input.dim(0) * input.dim(1);
  const int64_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const auto [D, H, W] = target;
  if (D < 1 || H < 1 || W < 1) throw std::invalid_argument("upsample_nearest3d: target dims must be positive");
  // src index per target voxel, precomputed once
  std::vector<int64_t> src(static_cast<size_t>(D * H * W));
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        src[(z * H + y) * W + x] =
            (std::min(z / 2, d - 1) * h + std::min(y / 2, h - 1)) * w + std::min(x / 2, w - 1);
  std::vector<T> out(static_cast<size_t>(nc * D * H * W));
  const T* px = input.data();
  const int64_t in_v = d * h * w, out_v = D * H * W;
  for (int64_t c = 0; c < nc; ++c)
    for (int64_t v = 0; v < out_v; ++v) out[c * out_v + v] = px[c * in_v + src[v]];
  Shape shape{input.dim(0), input.dim(1), D, H, W};
  return Tensor<T>::make_result(shape, std::move(out), {input}, [input, src, nc, in_v, out_v](detail::Node<T>& node) {
    T* gx = input.node()->grad_buffer();
    for (int64_t c = 0; c < nc; ++c)
      for (int64_t v = 0; v < out_v; ++v) gx[c * in_v + src[v]] += node.grad[c * out_v + v];
  });
}

template <typename T>
Tensor<T> roi_pool3d(const Tensor<T>& input, const std::vector<Region>& regions, Int3 out_dims) {
  require_rank(input, 5, "roi_pool3d");
  if (input.dim(0) != 1) throw std::invalid_argument("roi_pool3d: expects a single-volume feature map");
  if (regions.empty()) throw std::invalid_argument("roi_pool3d: no regions");
  const int64_t C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const auto [od, oh, ow] = out_dims;
  const int64_t R = static_cast<int64_t>(regions.size());
  struct RegionBins {
    Bins z, y, x;
    int64_t z0, y0, x0;
  };
  std::vector<RegionBins> bins;
  bins.reserve(regions.size());
  for (const auto& r : regions) {
    const auto& b = r.bounds;
    if (b[0] < 0 || b[1] < 0 || b[2] < 0 || b[3] > D || b[4] > H || b[5] > W || b[3] <= b[0] || b[4] <= b[1] ||
        b[5] <= b[2]) {
      throw std::invalid_argument("roi_pool3d: region outside feature bounds or empty");
    }
    bins.push_back({adaptive_bins(b[3] - b[0], od), adaptive_bins(b[4] - b[1], oh), adaptive_bins(b[5] - b[2], ow),
                    b[0], b[1], b[2]});
  }
  const int64_t cells = od * oh * ow;
  std::vector<T> out(static_cast<size_t>(R * C * cells));
  const T* px = input.data();
  for (int64_t r = 0; r < R; ++r) {
    const auto& rb = bins[r];
    for (int64_t c = 0; c < C; ++c) {
      const T* src = px + c * D * H * W;
      for (int64_t i = 0; i < od; ++i)
        for (int64_t j = 0; j < oh; ++j)
          for (int64_t k = 0; k < ow; ++k) {
            double acc = 0.0;
            for (int64_t z = rb.z.start[i]; z < rb.z.end[i]; ++z)
              for (int64_t y = rb.y.start[j]; y < rb.y.end[j]; ++y)
                for (int64_t x = rb.x.start[k]; x < rb.x.end[k]; ++x)
                  acc += src[((rb.z0 + z) * H + rb.y0 + y) * W + rb.x0 + x];
            const double count = double((rb.z.end[i] - rb.z.start[i]) * (rb.y.end[j] - rb.y.start[j]) *
                                        (rb.x.end[k] - rb.x.start[k]));
            out[((r * C + c) * od + i) * oh * ow + j * ow + k] = static_cast<T>(acc / count);
          }
    }
  }
  Shape shape{R, C, od, oh, ow};
  return Tensor<T>::make_result(shape, std::move(out), {input}, [input, bins, R, C, D, H, W, od, oh,
                                                                 ow](detail::Node<T>& node) {
    T* gx = input.node()->grad_buffer();
    for (int64_t r = 0; r < R; ++r) {
      const auto& rb = bins[r];
      for (int64_t c = 0; c < C; ++c) {
        T* dst = gx + c * D * H * W;
        for (int64_t i = 0; i < od; ++i)
          for (int64_t j = 0; j < oh; ++j)
            for (int64_t k = 0; k < ow; ++k) {
              const double count = double((rb.z.end[i] - rb.z.start[i]) * (rb.y.end[j] - rb.y.start[j]) *
                                          (rb.x.end[k] - rb.x.start[k]));
              const T g = static_cast<T>(node.grad[((r * C + c) * od + i) * oh * ow + j * ow + k] / count);
              for (int64_t z = rb.z.start[i]; z < rb.z.end[i]; ++z)
                for (int64_t y = rb.y.start[j]; y < rb.y.end[j]; ++y)
                  for (int64_t x = rb.x.start[k]; x < rb.x.end[k]; ++x)
                    dst[((rb.z0 + z) * H + rb.y0 + y) * W + rb.x0 + x] += g;
            }
      }
    }
  });
}

#define VOXSCREEN_INSTANTIATE(T)                                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                      \
  template Tensor<T> scale(const Tensor<T>&, double);                                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                                       \
  template Tensor<T> weighted_sum(const Tensor<T>&, std::span<const T>);                                           \
  template Tensor<T> relu(const Tensor<T>&);                                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                             \
  template Tensor<T> concat(const std::vector<Tensor<T>>&);                                                        \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Int3, Int3);                     \
  template Tensor<T> adaptive_avg_pool3d(const Tensor<T>&, Int3);                                                  \
  template Tensor<T> batch_norm3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,    \
                                  bool, double, double);                                                           \
  template Tensor<T> group_norm3d(const Tensor<T>&, int64_t, const Tensor<T>&, const Tensor<T>&, double);          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> upsample_nearest3d(const Tensor<T>&, Int3);                                                   \
  template Tensor<T> roi_pool3d(const Tensor<T>&, const std::vector<Region>&, Int3);

VOXSCREEN_INSTANTIATE(float)
VOXSCREEN_INSTANTIATE(double)
#undef VOXSCREEN_INSTANTIATE

}  // namespace voxscreen::nn
