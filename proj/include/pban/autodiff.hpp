#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pban/tensor.hpp"

namespace pban {

template <typename Scalar>
struct Node {
    using BackwardFn = std::function<void(const Tensor<Scalar>& grad_out)>;

    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::string op;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward_fn;

    /// Zero-initialised gradient buffer, allocated on first touch.
    Tensor<Scalar>& grad_buffer() {
        if (!has_grad) {
            grad = Tensor<Scalar>::zeros(value.shape());
            has_grad = true;
        }
        return grad;
    }

    void accumulate(const Tensor<Scalar>& g) { grad_buffer().vec() += g.vec(); }
};

/// Handle to a node in the computation graph. Copies share the node.
template <typename Scalar>
class Var {
public:
    using NodeType = Node<Scalar>;

    Var() = default;
    explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

    static Var parameter(Tensor<Scalar> value) { return leaf(std::move(value), true); }
    static Var constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor<Scalar>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    Index dim(Index axis) const { return node_->value.dim(axis); }
    bool requires_grad() const { return node_->requires_grad; }
    NodeType* node() const { return node_.get(); }
    const std::shared_ptr<NodeType>& ptr() const { return node_; }

private:
    static Var leaf(Tensor<Scalar> value, bool requires_grad) {
        auto node = std::make_shared<NodeType>();
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        node->op = requires_grad ? "parameter" : "constant";
        return Var(std::move(node));
    }

    std::shared_ptr<NodeType> node_;
};

using VarF = Var<float>;
using VarD = Var<double>;

/// Builds an interior node. The backward rule is dropped (and the parents
/// released) when no parent needs a gradient, so inference graphs do not
/// pin their intermediates. Throws NumericError if `value` is not finite.
template <typename Scalar>
Var<Scalar> make_node(std::string op, Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                      typename Node<Scalar>::BackwardFn backward) {
    if (!value.all_finite()) {
        throw NumericError("non-finite value produced by " + op + " (shape " +
                           shape_str(value.shape()) + ")");
    }
    auto node = std::make_shared<Node<Scalar>>();
    node->value = std::move(value);
    node->op = std::move(op);
    bool any = false;
    for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
    if (any) {
        node->requires_grad = true;
        for (auto& p : parents) {
            if (p.defined() && p.requires_grad()) node->parents.push_back(p.ptr());
        }
        node->backward_fn = std::move(backward);
    }
    return Var<Scalar>(std::move(node));
}

/// Accumulates `g` into `v` if `v` takes part in differentiation.
template <typename Scalar>
void accumulate_grad(const Var<Scalar>& v, const Tensor<Scalar>& g) {
    if (v.defined() && v.requires_grad()) v.node()->accumulate(g);
}

/// Gradient buffer of `v` for in-place accumulation, or nullptr when `v`
/// is a constant.
template <typename Scalar>
Tensor<Scalar>* grad_sink(const Var<Scalar>& v) {
    if (!v.defined() || !v.requires_grad()) return nullptr;
    return &v.node()->grad_buffer();
}

struct BackwardOptions {
    // When set, parent lists are visited in a seeded random order while
    // building the topological sweep. Used to check order independence.
    std::optional<std::uint64_t> shuffle_seed;
};

/// Leaf gradients produced by one backward sweep. Leaves that did not
/// receive any gradient report zeros of their value's shape.
template <typename Scalar>
class Gradients {
public:
    Tensor<Scalar> operator[](const Var<Scalar>& leaf) const {
        auto it = grads_.find(leaf.node());
        if (it == grads_.end()) return Tensor<Scalar>::zeros(leaf.shape());
        return it->second;
    }

    bool contains(const Var<Scalar>& leaf) const { return grads_.count(leaf.node()) > 0; }

    void set(const Node<Scalar>* node, Tensor<Scalar> g) { grads_[node] = std::move(g); }

private:
    std::unordered_map<const Node<Scalar>*, Tensor<Scalar>> grads_;
};

/// Reverse-mode sweep from a single-element root.
template <typename Scalar>
Gradients<Scalar> backward(const Var<Scalar>& root, const BackwardOptions& options = {});

extern template Gradients<float> backward(const Var<float>&, const BackwardOptions&);
extern template Gradients<double> backward(const Var<double>&, const BackwardOptions&);

}  // namespace pban
