#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace airseg::ad {

/// Global switch recorded at op-construction time; when disabled no graph is
/// built (inference mode). A graph is confined to one logical execution
/// context, so a plain thread_local flag is sufficient.
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class T>
struct Node {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on demand, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= size_t(d);
  }
  return n;
}

/// Shared handle to a tensor node. Copies alias the same storage; ops return
/// fresh nodes wired to their parents for reverse-mode differentiation.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->data.assign(shape_numel(shape), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw std::invalid_argument("tensor data length does not match shape");
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[size_t(i)]; }
  int ndim() const { return int(n_->shape.size()); }
  size_t size() const { return n_->data.size(); }

  T* data() { return n_->data.data(); }
  const T* data() const { return n_->data.data(); }
  std::vector<T>& data_vec() { return n_->data; }
  const std::vector<T>& data_vec() const { return n_->data; }

  T* grad() {
    n_->ensure_grad();
    return n_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return n_->grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a scalar tensor");
    return n_->data[0];
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

  /// Reverse pass from this scalar: topological order over the recorded
  /// graph, each node visited exactly once, gradients accumulated into
  /// every tensor with requires_grad.
  void backward() {
    if (size() != 1) throw std::invalid_argument("backward() requires a scalar tensor");
    // iterative post-order DFS
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx].get();
        ++idx;
        if (visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn && node->requires_grad && !node->grad.empty()) {
        node->backward_fn(*node);
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

/// True when an op whose inputs include these tensors should join the graph.
template <class T>
bool track_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace airseg::ad
