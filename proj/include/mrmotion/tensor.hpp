#pragma once

#include <atomic>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "mrmotion/common.hpp"

namespace mrmotion::ad {

// Sequential mode disables internal data-parallelism. Results are
// bit-identical either way; the switch exists for the CLI's --deterministic
// contract and for debugging.
inline std::atomic<bool>& sequential_mode() {
    static std::atomic<bool> flag{false};
    return flag;
}
inline void set_sequential(bool v) { sequential_mode().store(v); }

template <class T>
struct Node {
    std::vector<int64_t> shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    // reads this->grad, accumulates into parents' grads
    std::function<void(Node<T>&)> backprop;

    int64_t numel() const {
        int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

// Dense NCHW (or lower-rank) tensor recorded on an implicit tape. Copying a
// Tensor copies the handle, not the storage.
template <class T>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr<T> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value.assign(static_cast<size_t>(n->numel()), T(0));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(std::vector<int64_t> shape, std::vector<T> data,
                            bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        if (static_cast<int64_t>(data.size()) != n->numel())
            throw ValidationError("tensor: data length does not match shape");
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int64_t>& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    T item() const {
        if (numel() != 1) throw ValidationError("tensor: item() on non-scalar");
        return node_->value[0];
    }

    NodePtr<T>& node() { return node_; }
    const NodePtr<T>& node() const { return node_; }

  private:
    NodePtr<T> node_;
};

#ifndef NDEBUG
template <class T>
inline void debug_check_finite(const Node<T>& n) {
    for (const T& v : n.value) assert(std::isfinite(static_cast<double>(v)) && "non-finite tensor value");
}
#else
template <class T>
inline void debug_check_finite(const Node<T>&) {}
#endif

template <class T>
NodePtr<T> make_node(std::vector<int64_t> shape, std::vector<NodePtr<T>> parents) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(n->numel()), T(0));
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    return n;
}

// Reverse-mode accumulation from a scalar loss. The recorded graph is walked
// in reverse topological order, each node exactly once. Calling backward a
// second time on the same recorded loss is an error.
template <class T>
void backward(Tensor<T>& loss) {
    auto& root = loss.node();
    if (!root) throw ValidationError("backward: undefined tensor");
    if (root->numel() != 1) throw ValidationError("backward: loss must be scalar");
    if (root->backward_done)
        throw NumericError("backward: graph already consumed; re-record the forward pass");
    root->backward_done = true;

    // iterative post-order DFS over parents
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop && n->requires_grad) n->backprop(*n);
    }
}

// Central finite differences against the recorded analytic gradient.
// `build` must construct a fresh scalar-loss graph from the leaves on every
// call. Returns max over all leaf coordinates of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <class F>
double grad_check(std::vector<Tensor<double>>& leaves, F&& build, double h = 1e-4) {
    for (auto& l : leaves) l.zero_grad();
    Tensor<double> loss = build(leaves);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves) analytic.push_back(l.grad());

    double max_rel = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        if (!leaves[li].requires_grad()) continue;
        auto& vals = leaves[li].value();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + h;
            const double lp = build(leaves).item();
            vals[i] = saved - h;
            const double lm = build(leaves).item();
            vals[i] = saved;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[li][i];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace mrmotion::ad
