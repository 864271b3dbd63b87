#pragma once

// Classifier and backbone architectures. Everything is templated on the
// scalar type so the full networks can be gradient-checked in double.
//
// Spatial layout: a stride-2 stem followed by four stages whose first block
// downsamples by 2, so stage outputs sit at strides 4, 8, 16 and 32.

#include <array>
#include <span>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "voxscreen/ops.hpp"
#include "voxscreen/optim.hpp"
#include "voxscreen/rng.hpp"
#include "voxscreen/volume.hpp"

namespace voxscreen::models {

using nn::Int3;
using nn::Tensor;

enum class NormKind { batch, group, none };

std::string to_string(NormKind k);
NormKind parse_norm(const std::string& s);

struct ModelSpec {
  std::string family = "resnet3d";  // resnet3d | vrn
  int depth = 10;                   // resnet3d only: 10, 18, 34, 50, 101
  bool rich_features = true;
  int base_channels = 32;
  int fpn_channels = 64;
  NormKind norm = NormKind::group;

  void validate() const;
  /// "resnet3d-<depth>[-rich]" or "vrn".
  std::string arch() const;
  /// Parse an architecture string; widths and norm keep their defaults.
  static ModelSpec parse_arch(const std::string& arch);
  /// Canonical ImageNet-style widths (base 64, pyramid 256), for reference.
  static ModelSpec full_scale(const std::string& arch);

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);

  bool operator==(const ModelSpec&) const = default;
};

/// Stage output channels for a spec, e.g. base*{1,2,4,8} for basic blocks.
std::array<int64_t, 4> stage_channels(const ModelSpec& spec);

/// Group count used for a channel count: 8 when every group keeps at least
/// two channels, halved until it does.
int64_t norm_groups(int64_t channels);

template <typename T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  void set_training(bool on);
  bool training() const { return training_; }

  /// Trainable tensors with dotted names.
  std::vector<nn::Parameter<T>> parameters() const;
  /// Parameters plus running statistics: what a checkpoint stores.
  std::vector<nn::Parameter<T>> state() const;
  int64_t parameter_count() const;

 protected:
  Tensor<T> add_param(const std::string& name, Tensor<T> t);
  Tensor<T> add_buffer(const std::string& name, Tensor<T> t);
  void add_child(const std::string& name, Module* child);

 private:
  void collect(const std::string& prefix, bool buffers, std::vector<nn::Parameter<T>>& out) const;

  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool buffer;
  };
  std::vector<Entry> tensors_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

template <typename T>
class Conv3d : public Module<T> {
 public:
  Conv3d(int64_t in, int64_t out, Int3 kernel, Int3 stride, Int3 pad, bool bias, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight, bias;

 private:
  Int3 stride_, pad_;
};

template <typename T>
class Norm3d : public Module<T> {
 public:
  Norm3d(NormKind kind, int64_t channels);
  Tensor<T> forward(const Tensor<T>& x);

 private:
  NormKind kind_;
  int64_t groups_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int64_t in, int64_t out, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T> weight, bias;
};

/// conv (bias only without norm) -> norm -> optional relu.
template <typename T>
class ConvNorm : public Module<T> {
 public:
  ConvNorm(int64_t in, int64_t out, int64_t kernel, int64_t stride, NormKind norm, bool relu, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);

 private:
  Conv3d<T> conv_;
  Norm3d<T> norm_;
  bool relu_;
};

template <typename T>
class Block : public Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
};

template <typename T>
class BasicBlock : public Block<T> {
 public:
  BasicBlock(int64_t in, int64_t out, int64_t stride, NormKind norm, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) override;

 private:
  ConvNorm<T> a_, b_;
  std::unique_ptr<ConvNorm<T>> shortcut_;
};

template <typename T>
class Bottleneck : public Block<T> {
 public:
  static constexpr int64_t kExpansion = 4;
  Bottleneck(int64_t in, int64_t mid, int64_t stride, NormKind norm, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) override;

 private:
  ConvNorm<T> a_, b_, c_;
  std::unique_ptr<ConvNorm<T>> shortcut_;
};

/// Two residual paths, each producing half the channels:
///   A: 3^3 conv -> 3^3 conv
///   B: 1^3 conv -> 3^3 conv -> 1^3 conv
/// concatenated and added to the identity.
template <typename T>
class VrnBlock : public Block<T> {
 public:
  VrnBlock(int64_t channels, NormKind norm, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) override;

 private:
  ConvNorm<T> a1_, a2_, b1_, b2_, b3_;
};

/// Stride-2 downsampling convolution used between VRN stages.
template <typename T>
class DownBlock : public Block<T> {
 public:
  DownBlock(int64_t in, int64_t out, NormKind norm, Rng& rng) : conv_(in, out, 3, 2, norm, true, rng) {
    this->add_child("conv", &conv_);
  }
  Tensor<T> forward(const Tensor<T>& x) override { return conv_.forward(x); }

 private:
  ConvNorm<T> conv_;
};

template <typename T>
class Backbone : public Module<T> {
 public:
  Backbone(const ModelSpec& spec, Rng& rng);
  /// Outputs of the four stages, highest resolution first.
  std::array<Tensor<T>, 4> forward(const Tensor<T>& x);
  const std::array<int64_t, 4>& channels() const { return channels_; }

 private:
  ConvNorm<T> stem_;
  std::array<std::vector<std::unique_ptr<Block<T>>>, 4> stages_;
  std::array<int64_t, 4> channels_;
};

/// Backbone plus a single-logit fully connected head. With rich features the
/// four stage outputs are each pooled to 1^3 and concatenated; otherwise the
/// head sees only the pooled last stage.
template <typename T>
class Classifier : public Module<T> {
 public:
  Classifier(const ModelSpec& spec, uint64_t seed);
  /// x [N,1,D,H,W] -> logits [N,1].
  Tensor<T> forward(const Tensor<T>& x);
  const ModelSpec& spec() const { return spec_; }
  int64_t head_inputs() const { return head_inputs_; }

 private:
  ModelSpec spec_;
  Rng rng_;
  std::unique_ptr<Backbone<T>> backbone_;
  int64_t head_inputs_;
  std::unique_ptr<Linear<T>> head_;
};

/// Lateral 1^3 projections, nearest-neighbour top-down pathway and 3^3
/// smoothing, giving P1..P4 with `channels` each (P1 highest resolution).
template <typename T>
class Fpn : public Module<T> {
 public:
  Fpn(const std::array<int64_t, 4>& in_channels, int64_t channels, Rng& rng);
  std::array<Tensor<T>, 4> forward(const std::array<Tensor<T>, 4>& stages);

 private:
  std::vector<std::unique_ptr<Conv3d<T>>> lateral_, smooth_;
};

/// [1,1,D,H,W] tensor holding the volume.
template <typename T>
Tensor<T> volume_tensor(const Volume& v);

/// [N,1,D,H,W] batch with each volume at the origin and zeros past its extent;
/// D,H,W are the per-axis maxima.
template <typename T>
Tensor<T> batch_tensor(std::span<const Volume> vs);

/// Eval-mode probability for a volume that is already rescaled. Throws when an
/// axis is not below 2s, i.e. the volume cannot be a rescale output.
double classify(Classifier<float>& model, const Volume& v, int s);

extern template class Module<float>;
extern template class Module<double>;
extern template class Classifier<float>;
extern template class Classifier<double>;
extern template class Backbone<float>;
extern template class Backbone<double>;
extern template class Fpn<float>;
extern template class Fpn<double>;

}  // namespace voxscreen::models
