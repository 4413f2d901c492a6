#pragma once

// Dense tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle to a graph node. Ops build new nodes that keep
// their inputs alive only while some input requires a gradient; constant
// sub-graphs are dropped as soon as they are evaluated.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "ivcxr/errors.hpp"

namespace ivcxr::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    T* grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad.data();
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        for (auto d : shape)
            if (d == 0) throw ContractViolation("tensor shape " + to_string(shape) + " has a zero extent");
        if (values.size() != numel(shape))
            throw ContractViolation("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + to_string(shape));
        for (const T& v : values)
            if (!std::isfinite(v)) throw NumericFault("non-finite value in tensor constructor");
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return Tensor(shape, std::vector<T>(numel(shape), T(0)), requires_grad);
    }
    static Tensor full(const Shape& shape, T v) { return Tensor(shape, std::vector<T>(numel(shape), v)); }
    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }
    std::string_view op() const { return node_->op; }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const T> values() const { return node_->value; }
    /// In-place access for parameter updates and finite-difference probes.
    std::span<T> mutable_values() { return node_->value; }
    T operator[](std::size_t i) const { return node_->value[i]; }
    T item() const {
        require(size() == 1, "item() on a tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const T> grad() const {
        require(has_grad(), "tensor has no gradient");
        return node_->grad;
    }
    std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->value.size()}; }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
    void clear_grad() { node_->grad.clear(); }

    /// A new leaf holding the same values, cut from the graph.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    /// Reverse-mode pass from a single-element tensor. Leaf gradients accumulate;
    /// intermediate gradients are reset first so repeated calls add exactly.
    void backward() const {
        require(size() == 1, "backward() requires a scalar, got shape " + to_string(shape()));
        if (!node_->requires_grad) return;
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        // Leaf contributions are gathered in fresh buffers and added once at the end,
        // so the accumulated gradient is exactly old + new.
        std::vector<std::vector<T>> previous(order.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            Node<T>* n = order[i];
            if (n->is_leaf) previous[i] = std::move(n->grad);
            n->grad.assign(n->value.size(), T(0));
        }
        node_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if (!(*it)->is_leaf && (*it)->backward) (*it)->backward(**it);
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (previous[i].size() != order[i]->grad.size()) continue;
            for (std::size_t j = 0; j < previous[i].size(); ++j) order[i]->grad[j] += previous[i][j];
        }
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// While alive, ops record no graph: results are constants. Used for inference.
class NoGradGuard {
public:
    NoGradGuard() : previous_(enabled()) { enabled() = false; }
    ~NoGradGuard() { enabled() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }

private:
    bool previous_;
};

namespace detail {

/// Wrap a computed value as a graph node. `backward` receives the new node and
/// must add into the gradient buffers of those parents that require a gradient.
template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
    for (const T& v : value)
        if (!std::isfinite(v)) throw NumericFault(std::string("non-finite output from op '") + std::string(op) + "'");
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->is_leaf = false;
    bool rg = false;
    if (NoGradGuard::enabled())
        for (const auto& in : inputs) rg = rg || in.requires_grad();
    node->requires_grad = rg;
    if (rg) {
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
inline T* grad_of(Node<T>& self, std::size_t i) {
    Node<T>& p = *self.parents[i];
    return p.requires_grad ? p.grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace ivcxr::diff
