#include "pban/autodiff.hpp"

#include <algorithm>
#include <unordered_set>

#include "pban/random.hpp"

namespace pban {

namespace {

// Iterative post-order DFS; returns nodes with every parent before its child.
template <typename Scalar>
std::vector<Node<Scalar>*> topological_order(Node<Scalar>* root, const BackwardOptions& options) {
    std::vector<Node<Scalar>*> order;
    std::unordered_set<Node<Scalar>*> visited;
    std::optional<Rng> rng;
    if (options.shuffle_seed) rng.emplace(*options.shuffle_seed);

    struct Frame {
        Node<Scalar>* node;
        std::vector<Node<Scalar>*> pending;
    };
    auto make_frame = [&](Node<Scalar>* n) {
        Frame f{n, {}};
        for (const auto& p : n->parents) f.pending.push_back(p.get());
        if (rng) rng->shuffle(f.pending);
        std::reverse(f.pending.begin(), f.pending.end());
        return f;
    };

    std::vector<Frame> stack;
    visited.insert(root);
    stack.push_back(make_frame(root));
    while (!stack.empty()) {
        Frame& top = stack.back();
        if (top.pending.empty()) {
            order.push_back(top.node);
            stack.pop_back();
            continue;
        }
        Node<Scalar>* next = top.pending.back();
        top.pending.pop_back();
        if (visited.insert(next).second) stack.push_back(make_frame(next));
    }
    return order;
}

}  // namespace

template <typename Scalar>
Gradients<Scalar> backward(const Var<Scalar>& root, const BackwardOptions& options) {
    if (!root.defined()) throw ContractError("backward on undefined variable");
    if (root.value().size() != 1) {
        throw ContractError("backward root must be a scalar, got shape " + shape_str(root.shape()));
    }
    Gradients<Scalar> result;
    if (!root.requires_grad()) return result;

    auto order = topological_order(root.node(), options);
    for (auto* n : order) {
        n->has_grad = false;
        n->grad = Tensor<Scalar>();
    }
    root.node()->grad_buffer().vec().setOnes();

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<Scalar>* n = *it;
        if (!n->has_grad) continue;
        if (n->backward_fn) {
            n->backward_fn(n->grad);
            // Interior gradients are not needed once propagated.
            n->grad = Tensor<Scalar>();
            n->has_grad = false;
        } else {
            result.set(n, n->grad);
        }
    }
    return result;
}

template Gradients<float> backward(const Var<float>&, const BackwardOptions&);
template Gradients<double> backward(const Var<double>&, const BackwardOptions&);

}  // namespace pban
