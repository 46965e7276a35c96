#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "biomass/errors.hpp"
#include "biomass/rng.hpp"

namespace biomass {

enum class Mode { train, eval };

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// When enabled, tensors constructed from raw data reject NaN/Inf entries.
// On by default; training hot loops may disable it.
inline std::atomic<bool>& tensor_checks() {
  static std::atomic<bool> enabled{true};
  return enabled;
}

namespace detail {

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  // Accumulates into the parents' grad buffers given this node's grad.
  std::function<void(TensorNode<T>&)> backward_fn;

  std::size_t numel() const { return data.size(); }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major n-d value with optional participation in the gradient
// tape. Tensor is a cheap shared handle: copies alias the same node, which
// is what lets ops record the graph by keeping parent handles alive.
template <class T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " expects " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    if (tensor_checks().load(std::memory_order_relaxed)) {
      for (const T& v : data) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw NumericError("non-finite entry at tensor construction");
        }
      }
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  // Uniform fan-in initialization draws; bit-identical for a given stream.
  static Tensor uniform(Shape shape, T lo, T hi, RngStream& rng,
                        bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rank() const { return node_->shape.size(); }

  // rows/cols view of a [*, d] tensor: leading dims flattened
  std::size_t last_dim() const { return node_->shape.back(); }
  std::size_t rows() const { return numel() / last_dim(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> data_mut() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const {
    if (node_->grad.empty()) throw NumericError("grad not populated; run backward first");
    return node_->grad;
  }
  std::span<T> grad_mut() { return node_->grad_buffer(); }

  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return node_->data[0];
  }

  T at(std::size_t r, std::size_t c) const { return node_->data[r * last_dim() + c]; }

  // Reverse pass from a scalar output. Seeds d(out)/d(out) = 1 and walks the
  // recorded graph in reverse topological order, accumulating into the grad
  // buffer of every node with requires_grad.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar output");
    if (!node_->requires_grad) {
      throw NumericError("backward() on a tensor detached from the tape");
    }
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    // iterative DFS; graphs from long training batches can be deep
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node* p = n->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        topo.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer()[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;

  template <class U>
  friend Tensor<U> make_op(Shape shape, std::vector<U> data,
                           std::vector<Tensor<U>> parents,
                           std::function<void(detail::TensorNode<U>&)> backward);
};

// Records one op on the tape: output value plus a closure that scatters the
// output gradient into the parents. The closure runs iff some parent
// requires grad.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                  std::function<void(detail::TensorNode<T>&)> backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  Tensor<T> out;
  out.node_ = std::make_shared<detail::TensorNode<T>>();
  out.node_->shape = std::move(shape);
  out.node_->data = std::move(data);
  out.node_->requires_grad = needs;
  if (needs) {
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node());
    out.node_->backward_fn = std::move(backward);
  }
  return out;
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace biomass
