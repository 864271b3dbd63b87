#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace voxscreen::nn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Zero-initialised gradient buffer of value size.
  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

/// Shared handle to a node of the dynamic autodiff graph. Copies alias the
/// same storage. Graphs are per-thread; a finished backward() releases the
/// intermediate closures so activations are freed as soon as possible.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;
  using BackwardFn = std::function<void(Node&)>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<T>(values), requires_grad) {}

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i < 0 ? i + ndim() : i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  T item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
  /// Gradient view; allocates a zero buffer when none exists yet.
  std::span<T> grad() { return {node_->grad_buffer(), node_->value.size()}; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from this scalar.
  void backward() const;

  /// Leaf copy without graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Result of a differentiable op. Records `parents` and `fn` only when grad
  /// mode is on and at least one parent requires grad.
  static Tensor make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor> parents, BackwardFn fn);
  static Tensor make_result(Shape shape, std::vector<T> values, const std::vector<Tensor>& parents, BackwardFn fn);

 private:
  std::shared_ptr<Node> node_;
};

/// Grad recording is on by default; a live guard turns it off for the thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace voxscreen::nn
