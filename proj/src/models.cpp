#include "voxscreen/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voxscreen::models {

std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::batch: return "batch";
    case NormKind::group: return "group";
    case NormKind::none: return "none";
  }
  return "?";
}

NormKind parse_norm(const std::string& s) {
  if (s == "batch") return NormKind::batch;
  if (s == "group") return NormKind::group;
  if (s == "none") return NormKind::none;
  throw std::invalid_argument("unknown norm \"" + s + "\" (expected batch, group or none)");
}

namespace {

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

bool basic_depth(int depth) { return depth == 10 || depth == 18 || depth == 34; }

std::array<int, 4> block_counts(int depth) {
  switch (depth) {
    case 10: return {1, 1, 1, 1};
    case 18: return {2, 2, 2, 2};
    case 34:
    case 50: return {3, 4, 6, 3};
    case 101: return {3, 4, 23, 3};
  }
  throw std::invalid_argument("resnet3d depth must be one of 10, 18, 34, 50, 101 (got " + std::to_string(depth) + ")");
}

}  // namespace

void ModelSpec::validate() const {
  if (family == "resnet3d") {
    block_counts(depth);
  } else if (family != "vrn") {
    throw std::invalid_argument("model family must be resnet3d or vrn (got \"" + family + "\")");
  }
  if (!power_of_two(base_channels)) throw std::invalid_argument("model.base_channels must be a power of two");
  if (!power_of_two(fpn_channels)) throw std::invalid_argument("model.fpn_channels must be a power of two");
  if (family == "vrn" && base_channels < 2) {
    throw std::invalid_argument("vrn needs an even channel count per stage (base_channels >= 2)");
  }
}

std::string ModelSpec::arch() const {
  if (family == "vrn") return "vrn";
  return "resnet3d-" + std::to_string(depth) + (rich_features ? "-rich" : "");
}

ModelSpec ModelSpec::parse_arch(const std::string& arch) {
  ModelSpec spec;
  if (arch == "vrn") {
    spec.family = "vrn";
    spec.depth = 0;
    spec.rich_features = false;
    return spec;
  }
  const std::string prefix = "resnet3d-";
  if (arch.rfind(prefix, 0) != 0) throw std::invalid_argument("unknown architecture \"" + arch + "\"");
  std::string rest = arch.substr(prefix.size());
  spec.rich_features = false;
  const std::string rich = "-rich";
  if (rest.size() > rich.size() && rest.compare(rest.size() - rich.size(), rich.size(), rich) == 0) {
    spec.rich_features = true;
    rest.resize(rest.size() - rich.size());
  }
  try {
    size_t used = 0;
    spec.depth = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw std::invalid_argument("unknown architecture \"" + arch + "\"");
  }
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::full_scale(const std::string& arch) {
  ModelSpec spec = parse_arch(arch);
  spec.base_channels = 64;
  spec.fpn_channels = 256;
  spec.norm = NormKind::batch;
  return spec;
}

nlohmann::json ModelSpec::to_json() const {
  return {{"arch", arch()},
          {"base_channels", base_channels},
          {"fpn_channels", fpn_channels},
          {"norm", models::to_string(norm)}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items()) {
    if (key != "arch" && key != "base_channels" && key != "fpn_channels" && key != "norm") {
      throw std::invalid_argument("unknown key model." + key);
    }
  }
  ModelSpec spec = parse_arch(j.value("arch", std::string("resnet3d-10-rich")));
  spec.base_channels = j.value("base_channels", spec.base_channels);
  spec.fpn_channels = j.value("fpn_channels", spec.fpn_channels);
  spec.norm = parse_norm(j.value("norm", models::to_string(spec.norm)));
  spec.validate();
  return spec;
}

std::array<int64_t, 4> stage_channels(const ModelSpec& spec) {
  const int64_t b = spec.base_channels;
  const int64_t expansion = spec.family == "resnet3d" && !basic_depth(spec.depth) ? Bottleneck<float>::kExpansion : 1;
  return {b * expansion, 2 * b * expansion, 4 * b * expansion, 8 * b * expansion};
}

int64_t norm_groups(int64_t channels) {
  int64_t g = 8;
  while (g > 1 && (channels % g != 0 || channels / g < 2)) g /= 2;
  return g;
}

// Module ---------------------------------------------------------------------

template <typename T>
void Module<T>::set_training(bool on) {
  training_ = on;
  for (auto& [_, child] : children_) child->set_training(on);
}

template <typename T>
void Module<T>::collect(const std::string& prefix, bool buffers, std::vector<nn::Parameter<T>>& out) const {
  for (const auto& e : tensors_) {
    if (!e.buffer || buffers) out.push_back({prefix + e.name, e.tensor});
  }
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", buffers, out);
}

template <typename T>
std::vector<nn::Parameter<T>> Module<T>::parameters() const {
  std::vector<nn::Parameter<T>> out;
  collect("", false, out);
  return out;
}

template <typename T>
std::vector<nn::Parameter<T>> Module<T>::state() const {
  std::vector<nn::Parameter<T>> out;
  collect("", true, out);
  return out;
}

template <typename T>
int64_t Module<T>::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
Tensor<T> Module<T>::add_param(const std::string& name, Tensor<T> t) {
  t.set_requires_grad(true);
  tensors_.push_back({name, t, false});
  return t;
}

template <typename T>
Tensor<T> Module<T>::add_buffer(const std::string& name, Tensor<T> t) {
  tensors_.push_back({name, t, true});
  return t;
}

template <typename T>
void Module<T>::add_child(const std::string& name, Module* child) {
  children_.emplace_back(name, child);
}

// Layers ---------------------------------------------------------------------

template <typename T>
Conv3d<T>::Conv3d(int64_t in, int64_t out, Int3 kernel, Int3 stride, Int3 pad, bool with_bias, Rng& rng)
    : stride_(stride), pad_(pad) {
  Tensor<T> w({out, in, kernel[0], kernel[1], kernel[2]});
  // He initialisation for ReLU networks
  const double stdev = std::sqrt(2.0 / double(in * kernel[0] * kernel[1] * kernel[2]));
  for (auto& v : w.values()) v = static_cast<T>(rng.normal() * stdev);
  weight = this->add_param("weight", w);
  if (with_bias) bias = this->add_param("bias", Tensor<T>({out}));
}

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x) const {
  return nn::conv3d(x, weight, bias, stride_, pad_);
}

template <typename T>
Norm3d<T>::Norm3d(NormKind kind, int64_t channels) : kind_(kind), groups_(norm_groups(channels)) {
  if (kind_ == NormKind::none) return;
  gamma_ = this->add_param("gamma", Tensor<T>({channels}, std::vector<T>(channels, T(1))));
  beta_ = this->add_param("beta", Tensor<T>({channels}));
  if (kind_ == NormKind::batch) {
    running_mean_ = this->add_buffer("running_mean", Tensor<T>({channels}));
    running_var_ = this->add_buffer("running_var", Tensor<T>({channels}, std::vector<T>(channels, T(1))));
  }
}

template <typename T>
Tensor<T> Norm3d<T>::forward(const Tensor<T>& x) {
  switch (kind_) {
    case NormKind::batch: return nn::batch_norm3d(x, gamma_, beta_, running_mean_, running_var_, this->training());
    case NormKind::group: return nn::group_norm3d(x, groups_, gamma_, beta_);
    case NormKind::none: return x;
  }
  return x;
}

template <typename T>
Linear<T>::Linear(int64_t in, int64_t out, Rng& rng) {
  Tensor<T> w({out, in});
  const double bound = 1.0 / std::sqrt(double(in));
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  weight = this->add_param("weight", w);
  bias = this->add_param("bias", Tensor<T>({out}));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return nn::linear(x, weight, bias);
}

template <typename T>
ConvNorm<T>::ConvNorm(int64_t in, int64_t out, int64_t kernel, int64_t stride, NormKind norm, bool relu, Rng& rng)
    : conv_(in, out, {kernel, kernel, kernel}, {stride, stride, stride},
            {kernel / 2, kernel / 2, kernel / 2}, norm == NormKind::none, rng),
      norm_(norm, out),
      relu_(relu) {
  this->add_child("conv", &conv_);
  this->add_child("norm", &norm_);
}

template <typename T>
Tensor<T> ConvNorm<T>::forward(const Tensor<T>& x) {
  Tensor<T> y = norm_.forward(conv_.forward(x));
  return relu_ ? nn::relu(y) : y;
}

// Blocks ---------------------------------------------------------------------

template <typename T>
BasicBlock<T>::BasicBlock(int64_t in, int64_t out, int64_t stride, NormKind norm, Rng& rng)
    : a_(in, out, 3, stride, norm, true, rng), b_(out, out, 3, 1, norm, false, rng) {
  this->add_child("conv1", &a_);
  this->add_child("conv2", &b_);
  if (stride != 1 || in != out) {
    shortcut_ = std::make_unique<ConvNorm<T>>(in, out, 1, stride, norm, false, rng);
    this->add_child("shortcut", shortcut_.get());
  }
}

template <typename T>
Tensor<T> BasicBlock<T>::forward(const Tensor<T>& x) {
  const Tensor<T> identity = shortcut_ ? shortcut_->forward(x) : x;
  return nn::relu(nn::add(b_.forward(a_.forward(x)), identity));
}

template <typename T>
Bottleneck<T>::Bottleneck(int64_t in, int64_t mid, int64_t stride, NormKind norm, Rng& rng)
    : a_(in, mid, 1, 1, norm, true, rng),
      b_(mid, mid, 3, stride, norm, true, rng),
      c_(mid, mid * kExpansion, 1, 1, norm, false, rng) {
  this->add_child("conv1", &a_);
  this->add_child("conv2", &b_);
  this->add_child("conv3", &c_);
  if (stride != 1 || in != mid * kExpansion) {
    shortcut_ = std::make_unique<ConvNorm<T>>(in, mid * kExpansion, 1, stride, norm, false, rng);
    this->add_child("shortcut", shortcut_.get());
  }
}

template <typename T>
Tensor<T> Bottleneck<T>::forward(const Tensor<T>& x) {
  const Tensor<T> identity = shortcut_ ? shortcut_->forward(x) : x;
  return nn::relu(nn::add(c_.forward(b_.forward(a_.forward(x))), identity));
}

namespace {
int64_t half_channels(int64_t c) {
  if (c % 2 != 0) throw std::invalid_argument("vrn block needs an even channel count, got " + std::to_string(c));
  return c / 2;
}
}  // namespace

template <typename T>
VrnBlock<T>::VrnBlock(int64_t c, NormKind norm, Rng& rng)
    : a1_(c, half_channels(c), 3, 1, norm, true, rng),
      a2_(c / 2, c / 2, 3, 1, norm, false, rng),
      b1_(c, c / 2, 1, 1, norm, true, rng),
      b2_(c / 2, c / 2, 3, 1, norm, true, rng),
      b3_(c / 2, c / 2, 1, 1, norm, false, rng) {
  this->add_child("a1", &a1_);
  this->add_child("a2", &a2_);
  this->add_child("b1", &b1_);
  this->add_child("b2", &b2_);
  this->add_child("b3", &b3_);
}

template <typename T>
Tensor<T> VrnBlock<T>::forward(const Tensor<T>& x) {
  const Tensor<T> a = a2_.forward(a1_.forward(x));
  const Tensor<T> b = b3_.forward(b2_.forward(b1_.forward(x)));
  return nn::relu(nn::add(nn::concat<T>({a, b}), x));
}

// Backbone -------------------------------------------------------------------

template <typename T>
Backbone<T>::Backbone(const ModelSpec& spec, Rng& rng)
    : stem_(1, spec.base_channels, 3, 2, spec.norm, true, rng), channels_(stage_channels(spec)) {
  spec.validate();
  this->add_child("stem", &stem_);
  int64_t in = spec.base_channels;
  for (int s = 0; s < 4; ++s) {
    auto& stage = stages_[s];
    const std::string prefix = "stage" + std::to_string(s + 1) + ".";
    if (spec.family == "vrn") {
      stage.push_back(std::make_unique<DownBlock<T>>(in, channels_[s], spec.norm, rng));
      stage.push_back(std::make_unique<VrnBlock<T>>(channels_[s], spec.norm, rng));
    } else {
      const int n_blocks = block_counts(spec.depth)[s];
      const int64_t width = int64_t(spec.base_channels) << s;
      for (int b = 0; b < n_blocks; ++b) {
        const int64_t stride = b == 0 ? 2 : 1;
        const int64_t block_in = b == 0 ? in : channels_[s];
        if (basic_depth(spec.depth)) {
          stage.push_back(std::make_unique<BasicBlock<T>>(block_in, width, stride, spec.norm, rng));
        } else {
          stage.push_back(std::make_unique<Bottleneck<T>>(block_in, width, stride, spec.norm, rng));
        }
      }
    }
    for (size_t b = 0; b < stage.size(); ++b) this->add_child(prefix + "block" + std::to_string(b), stage[b].get());
    in = channels_[s];
  }
}

template <typename T>
std::array<Tensor<T>, 4> Backbone<T>::forward(const Tensor<T>& x) {
  std::array<Tensor<T>, 4> out;
  Tensor<T> h = stem_.forward(x);
  for (int s = 0; s < 4; ++s) {
    for (auto& block : stages_[s]) h = block->forward(h);
    out[s] = h;
  }
  return out;
}

// Classifier -----------------------------------------------------------------

template <typename T>
Classifier<T>::Classifier(const ModelSpec& spec, uint64_t seed) : spec_(spec), rng_(seed) {
  spec_.validate();
  backbone_ = std::make_unique<Backbone<T>>(spec_, rng_);
  const auto& ch = backbone_->channels();
  head_inputs_ = spec_.rich_features ? ch[0] + ch[1] + ch[2] + ch[3] : ch[3];
  head_ = std::make_unique<Linear<T>>(head_inputs_, 1, rng_);
  this->add_child("backbone", backbone_.get());
  this->add_child("head", head_.get());
}

template <typename T>
Tensor<T> Classifier<T>::forward(const Tensor<T>& x) {
  const auto stages = backbone_->forward(x);
  const int64_t n = x.dim(0);
  auto pooled = [&](int s) {
    return nn::reshape(nn::adaptive_avg_pool3d(stages[s], {1, 1, 1}), {n, stages[s].dim(1)});
  };
  Tensor<T> features;
  if (spec_.rich_features) {
    features = nn::concat<T>({pooled(0), pooled(1), pooled(2), pooled(3)});
  } else {
    features = pooled(3);
  }
  return head_->forward(features);
}

// FPN ------------------------------------------------------------------------

template <typename T>
Fpn<T>::Fpn(const std::array<int64_t, 4>& in_channels, int64_t channels, Rng& rng) {
  for (int l = 0; l < 4; ++l) {
    lateral_.push_back(std::make_unique<Conv3d<T>>(in_channels[l], channels, Int3{1, 1, 1}, Int3{1, 1, 1},
                                                   Int3{0, 0, 0}, true, rng));
    smooth_.push_back(std::make_unique<Conv3d<T>>(channels, channels, Int3{3, 3, 3}, Int3{1, 1, 1}, Int3{1, 1, 1},
                                                  true, rng));
    this->add_child("lateral" + std::to_string(l + 1), lateral_[l].get());
    this->add_child("smooth" + std::to_string(l + 1), smooth_[l].get());
  }
}

template <typename T>
std::array<Tensor<T>, 4> Fpn<T>::forward(const std::array<Tensor<T>, 4>& stages) {
  std::array<Tensor<T>, 4> top;
  top[3] = lateral_[3]->forward(stages[3]);
  for (int l = 2; l >= 0; --l) {
    const Tensor<T> lat = lateral_[l]->forward(stages[l]);
    top[l] = nn::add(lat, nn::upsample_nearest3d(top[l + 1], {lat.dim(2), lat.dim(3), lat.dim(4)}));
  }
  std::array<Tensor<T>, 4> out;
  for (int l = 0; l < 4; ++l) out[l] = smooth_[l]->forward(top[l]);
  return out;
}

// Inference helpers ----------------------------------------------------------

template <typename T>
Tensor<T> volume_tensor(const Volume& v) {
  const Dims3& d = v.dims();
  return Tensor<T>({1, 1, d.d, d.h, d.w}, std::vector<T>(v.data().begin(), v.data().end()));
}

template <typename T>
Tensor<T> batch_tensor(std::span<const Volume> vs) {
  if (vs.empty()) throw std::invalid_argument("batch_tensor: empty batch");
  Dims3 m{0, 0, 0};
  for (const auto& v : vs) {
    for (int a = 0; a < 3; ++a) m[a] = std::max(m[a], v.dims()[a]);
  }
  std::vector<T> data(size_t(vs.size()) * size_t(m.voxels()), T(0));
  for (size_t n = 0; n < vs.size(); ++n) {
    const Dims3& d = vs[n].dims();
    T* out = data.data() + n * size_t(m.voxels());
    for (int64_t z = 0; z < d.d; ++z)
      for (int64_t y = 0; y < d.h; ++y)
        for (int64_t x = 0; x < d.w; ++x) out[(z * m.h + y) * m.w + x] = T(vs[n].at(z, y, x));
  }
  return Tensor<T>({int64_t(vs.size()), 1, m.d, m.h, m.w}, std::move(data));
}

double classify(Classifier<float>& model, const Volume& v, int s) {
  for (int a = 0; a < 3; ++a) {
    if (v.dims()[a] >= 2 * s) {
      throw std::invalid_argument("classify: volume " + to_string(v.dims()) + " was not rescaled with s=" +
                                  std::to_string(s) + " (every axis must be < " + std::to_string(2 * s) + ")");
    }
  }
  nn::NoGradGuard no_grad;
  const bool was_training = model.training();
  model.set_training(false);
  const float logit = model.forward(volume_tensor<float>(v)).item();
  model.set_training(was_training);
  return 1.0 / (1.0 + std::exp(-double(logit)));
}

template class Module<float>;
template class Module<double>;
template class Conv3d<float>;
template class Conv3d<double>;
template class Norm3d<float>;
template class Norm3d<double>;
template class Linear<float>;
template class Linear<double>;
template class ConvNorm<float>;
template class ConvNorm<double>;
template class BasicBlock<float>;
template class BasicBlock<double>;
template class Bottleneck<float>;
template class Bottleneck<double>;
template class VrnBlock<float>;
template class VrnBlock<double>;
template class Backbone<float>;
template class Backbone<double>;
template class Classifier<float>;
template class Classifier<double>;
template class Fpn<float>;
template class Fpn<double>;
template Tensor<float> volume_tensor<float>(const Volume&);
template Tensor<double> volume_tensor<double>(const Volume&);
template Tensor<float> batch_tensor<float>(std::span<const Volume>);
template Tensor<double> batch_tensor<double>(std::span<const Volume>);

}  // namespace voxscreen::models
