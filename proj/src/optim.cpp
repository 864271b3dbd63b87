#include "voxscreen/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace voxscreen::nn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("train.beta1 must lie in (0,1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("train.beta2 must lie in (0,1)");
  if (!(eps > 0.0)) throw std::invalid_argument("train.eps must be > 0");
  if (max_iterations < 1) throw std::invalid_argument("train.max_iterations must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train.epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  for (size_t i = 0; i < lr_milestones.size(); ++i) {
    const double m = lr_milestones[i];
    if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("train.lr_milestones must lie in (0,1)");
    if (i > 0 && !(m > lr_milestones[i - 1])) throw std::invalid_argument("train.lr_milestones must be ascending");
  }
  if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw std::invalid_argument("train.lr_gamma must lie in (0,1]");
  if (!(positive_weight > 0.0 && std::isfinite(positive_weight))) {
    throw std::invalid_argument("train.positive_weight must be > 0");
  }
}

int64_t TrainConfig::total_steps(int64_t n_samples) const {
  if (epochs == 0) return max_iterations;
  return epochs * ((n_samples + batch_size - 1) / batch_size);
}

double TrainConfig::learning_rate_at(int64_t step, int64_t total) const {
  double lr = learning_rate;
  for (double m : lr_milestones) {
    if (double(step) >= m * double(total)) lr *= lr_gamma;
  }
  return lr;
}

template <typename T>
void adam_step(std::span<Parameter<T>> params, AdamState<T>& state, const TrainConfig& cfg, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
      state.v.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameter list");
  for (size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (state.m[k].size() != static_cast<size_t>(p.tensor.numel())) {
      throw std::invalid_argument("adam_step: state size mismatch for " + p.name);
    }
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in parameter " + p.name);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    T* w = p.tensor.data();
    T* m = state.m[k].data();
    T* v = state.v[k].data();
    const bool has = p.tensor.has_grad();
    const T* g = has ? p.tensor.grad().data() : nullptr;
    for (int64_t i = 0; i < p.tensor.numel(); ++i) {
      const double gi = has ? double(g[i]) : 0.0;
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1, vhat = vi / bc2;
      w[i] = static_cast<T>(double(w[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template void adam_step(std::span<Parameter<float>>, AdamState<float>&, const TrainConfig&, double);
template void adam_step(std::span<Parameter<double>>, AdamState<double>&, const TrainConfig&, double);

}  // namespace voxscreen::nn
