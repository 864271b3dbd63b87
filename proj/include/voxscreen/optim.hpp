#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxscreen/tensor.hpp"

namespace voxscreen::nn {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t max_iterations = 150;  // optimizer steps; used when epochs == 0
  int64_t epochs = 0;
  int64_t batch_size = 1;
  std::vector<double> lr_milestones;  // ascending fractions of training; lr *= lr_gamma at each
  double lr_gamma = 0.1;
  double positive_weight = 1.0;  // classifier loss weight of positive samples

  void validate() const;
  /// Optimizer steps for a training set of n samples.
  int64_t total_steps(int64_t n_samples) const;
  double learning_rate_at(int64_t step, int64_t total) const;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

/// One bias-corrected Adam update over `params`, reading each tensor's
/// accumulated gradient (no gradient counts as zero). All gradients are
/// checked before anything is written; a non-finite entry throws
/// std::runtime_error naming the parameter.
template <typename T>
void adam_step(std::span<Parameter<T>> params, AdamState<T>& state, const TrainConfig& cfg, double lr);

template <typename T>
void adam_step(std::span<Parameter<T>> params, AdamState<T>& state, const TrainConfig& cfg) {
  adam_step(params, state, cfg, cfg.learning_rate);
}

template <typename T>
void zero_grad(std::span<Parameter<T>> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

extern template void adam_step(std::span<Parameter<float>>, AdamState<float>&, const TrainConfig&, double);
extern template void adam_step(std::span<Parameter<double>>, AdamState<double>&, const TrainConfig&, double);

}  // namespace voxscreen::nn
