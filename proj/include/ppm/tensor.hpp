#pragma once

// Reverse-mode autodiff tensor. A TensorT<T> is a shared handle to a graph
// node; ops in ops.hpp build the graph forward and attach backward closures.
// The closure receives the node itself by reference and reaches inputs through
// node.parents, so closures never capture node handles and graphs free cleanly
// once the root handle goes out of scope.
//
// T is float in training and double inside finite-difference oracles.

#include <cstddef>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ppm/common.hpp"

namespace ppm {

template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until gradient first flows into this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

inline thread_local bool g_grad_enabled = true;

inline bool grad_enabled() { return g_grad_enabled; }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class TensorT {
  public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<NodeT<T>> node) : node_(std::move(node)) {}

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        auto n = std::make_shared<NodeT<T>>();
        n->data.assign(shape_numel(shape), T(0));
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }

    static TensorT full(Shape shape, T value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (T& v : t.data()) v = value;
        return t;
    }

    static TensorT from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw ShapeError("tensor init: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(shape));
        auto n = std::make_shared<NodeT<T>>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    NodeT<T>* get() const { return node_.get(); }
    const std::shared_ptr<NodeT<T>>& handle() const { return node_; }

    const Shape& shape() const { return node_->shape; }
    size_t numel() const { return node_->data.size(); }
    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }
    std::vector<T>& grad() { return node_->grad; }
    const std::vector<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    int dim(int i) const {
        const int r = static_cast<int>(node_->shape.size());
        if (i < 0) i += r;
        if (i < 0 || i >= r) throw IndexError("dim " + std::to_string(i) + " of rank " + std::to_string(r));
        return node_->shape[i];
    }

    // Gradient of a scalar root with respect to every reachable node that
    // requires it. Iterative post-order traversal; no recursion.
    void backward() const {
        if (numel() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(shape()));
        if (!node_->requires_grad) return;

        std::vector<NodeT<T>*> order;
        std::unordered_set<NodeT<T>*> seen;
        std::vector<std::pair<NodeT<T>*, size_t>> stack;
        seen.insert(node_.get());
        stack.push_back({node_.get(), 0});
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                NodeT<T>* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }

        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT<T>* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

  private:
    std::shared_ptr<NodeT<T>> node_;
};

using Tensor = TensorT<float>;

// Graph-node factory used by every op. With gradients disabled, or when no
// input requires them, the result is a plain constant and the inputs are not
// retained.
template <typename T>
TensorT<T> make_op_node(Shape shape, std::vector<TensorT<T>> inputs,
                        std::function<void(NodeT<T>&)> backward_fn) {
    auto n = std::make_shared<NodeT<T>>();
    n->data.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (grad_enabled() && rg) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) n->parents.push_back(in.handle());
        n->backward_fn = std::move(backward_fn);
    }
    return TensorT<T>(std::move(n));
}

}  // namespace ppm
