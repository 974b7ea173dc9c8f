#pragma once

// Reverse-mode autodiff on dense row-major tensors, templated on scalar type.
// float drives training; double drives finite-difference verification.
//
// A Tensor is a cheap handle on a graph node.  Ops (see ops.hpp) build the
// graph only when some input requires gradients, so passes through frozen
// weights run graph-free.  backward() walks the graph once and then consumes
// it; a second call on the same graph is an error.  Every op output is scanned
// for NaN/Inf at creation and failures name the op and tensor involved.

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "memcom/common.hpp"

namespace memcom {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    MEMCOM_CHECK(d >= 0, "shape with negative dim");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  std::vector<T> grad;  // lazily allocated, same shape as value when present
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const std::vector<T>&)> backward_fn;  // receives grad of this node
  std::string op;   // op that produced this node, or "leaf"
  std::string name; // optional diagnostic name for leaves
  bool consumed = false;

  void accum_grad(const T* src, int64_t n) {
    if (grad.empty()) grad.assign(value.size(), T(0));
    for (int64_t i = 0; i < n; ++i) grad[static_cast<size_t>(i)] += src[i];
  }
};

// When a NoGradGuard is alive on the current thread, ops build no graph even
// for tensors that require gradients.  Used by evaluation paths.
inline bool& nograd_flag() {
  thread_local bool f = false;
  return f;
}

struct NoGradGuard {
  NoGradGuard() : prev(nograd_flag()) { nograd_flag() = true; }
  ~NoGradGuard() { nograd_flag() = prev; }
  bool prev;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<T> data, bool requires_grad = false,
                     std::string name = "") {
    int64_t n = shape_numel(shape);
    MEMCOM_CHECK(n == static_cast<int64_t>(data.size()),
                 "leaf '" + name + "': data size does not match shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    node->op = "leaf";
    node->name = std::move(name);
    Tensor t(std::move(node));
    t.check_finite("leaf");
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false, std::string name = "") {
    int64_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0)), requires_grad,
                std::move(name));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    int64_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<T>(static_cast<size_t>(n), v), requires_grad);
  }

  // Internal: op result constructor.  Drops graph edges when no parent needs
  // gradients or a NoGradGuard is active.
  static Tensor op_result(Shape shape, std::vector<T> value, const char* op,
                          std::vector<Tensor> parents,
                          std::function<void(const std::vector<T>&)> backward_fn) {
    int64_t n = shape_numel(shape);
    MEMCOM_CHECK(n == static_cast<int64_t>(value.size()),
                 std::string(op) + ": output size does not match shape");
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool rg = false;
    if (!nograd_flag()) {
      for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    node->requires_grad = rg;
    if (rg) {
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_);
      node->backward_fn = std::move(backward_fn);
    }
    Tensor t(std::move(node));
    t.check_finite(op);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const {
    MEMCOM_CHECK(i < node_->shape.size(), "dim index out of range");
    return node_->shape[i];
  }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  const std::string& name() const { return node_->name; }
  void set_name(std::string n) { node_->name = std::move(n); }

  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& data_mut() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zeros when backward never reached this tensor.
  const std::vector<T>& grad() const {
    MEMCOM_CHECK(node_->requires_grad, "grad() on tensor that does not require gradients");
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  T at(std::initializer_list<int64_t> idx) const {
    MEMCOM_CHECK(idx.size() == rank(), "at(): index rank mismatch");
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      MEMCOM_CHECK(i >= 0 && i < node_->shape[k], "at(): index out of range");
      off = off * node_->shape[k] + i;
      ++k;
    }
    return node_->value[static_cast<size_t>(off)];
  }

  T item() const {
    MEMCOM_CHECK(numel() == 1, "item() on non-scalar tensor");
    return node_->value[0];
  }

  // Deep copy with a fresh, unconnected node.
  Tensor clone() const {
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    node->op = "leaf";
    node->name = node_->name;
    return Tensor(std::move(node));
  }

  void set_requires_grad(bool rg) {
    MEMCOM_CHECK(node_->op == "leaf", "set_requires_grad on non-leaf tensor");
    node_->requires_grad = rg;
  }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

  // Backpropagate from this scalar.  Accumulates into .grad of every tensor
  // that requires gradients, then releases the graph.
  void backward() const {
    MEMCOM_CHECK(defined(), "backward() on undefined tensor");
    MEMCOM_CHECK(numel() == 1, "backward() requires a scalar, got " + shape_str(shape()));
    MEMCOM_CHECK(node_->requires_grad,
                 "backward(): output does not depend on any tensor requiring gradients");
    MEMCOM_CHECK(!node_->consumed, "backward(): graph already consumed; rebuild the forward pass");

    // Post-order over parents: inputs appear before the nodes that use them.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        TensorNode<T>* p = n->parents[i].get();
        ++i;
        if (p->requires_grad && !seen.count(p)) {
          MEMCOM_CHECK(!p->consumed,
                       "backward(): graph already consumed; rebuild the forward pass");
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->grad.assign(node_->value.size(), T(0));
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->op != "leaf") n->consumed = true;
      if (n->backward_fn) {
        if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
        n->backward_fn(n->grad);
      }
    }
    // Release closures and edges; leaf grads survive for the optimizer.
    for (TensorNode<T>* n : order) {
      n->backward_fn = nullptr;
      n->parents.clear();
      if (n->op != "leaf") n->grad.clear();
    }
  }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  void check_finite(const char* op) const {
    const auto& v = node_->value;
    if (v.empty()) return;
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> m(v.data(),
                                                           static_cast<Eigen::Index>(v.size()));
    if (!m.allFinite()) {
      std::string who = node_->name.empty() ? shape_str(node_->shape) : node_->name;
      throw NumericError(std::string("non-finite value produced by op '") + op + "' in tensor " +
                         who);
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

}  // namespace memcom
