#include "voxscreen/tensor.hpp"

#include <stdexcept>
#include <unordered_set>

namespace voxscreen::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 1) throw std::invalid_argument("tensor dims must be positive, got " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) : node_(std::make_shared<Node>()) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw std::invalid_argument("tensor value count " + std::to_string(values.size()) + " does not match shape " +
                                shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor> parents,
                                 BackwardFn fn) {
  return make_result(std::move(shape), std::move(values), std::vector<Tensor>(parents), std::move(fn));
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, const std::vector<Tensor>& parents,
                                 BackwardFn fn) {
  Tensor out(std::move(shape), std::move(values), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  for (const auto& p : parents) {
    if (p.requires_grad()) out.node_->parents.push_back(p.node_);
  }
  out.node_->backward = std::move(fn);
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw std::logic_error("backward() needs a scalar, got shape " + shape_string(shape()));
  if (!requires_grad()) throw std::logic_error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Release the graph below the root; leaves keep their gradients.
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      if (n != node_.get()) {
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace voxscreen::nn
