#pragma once

#include <vector>

#include "pban/autodiff.hpp"

// Differentiable tensor-core operations. All functions are templated on the
// scalar type and explicitly instantiated for float and double.

namespace pban {

/// [m,k] x [k,n] -> [m,n].
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b);

/// Batched product over the leading axis: op(a[b]) * op(b[b]) where op is
/// an optional transpose of the trailing two axes.
template <typename S>
Var<S> bmm(const Var<S>& a, const Var<S>& b, bool transpose_a = false, bool transpose_b = false);

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b);

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b);

/// Elementwise product. `b` may broadcast: each of its extents equals the
/// matching extent of `a` or is 1 (ranks must agree).
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b);

template <typename S>
Var<S> scale(const Var<S>& x, S factor);

/// Sum of all elements as a rank-0 tensor.
template <typename S>
Var<S> sum(const Var<S>& x);

template <typename S>
Var<S> mean(const Var<S>& x);

template <typename S>
Var<S> relu(const Var<S>& x);

template <typename S>
Var<S> sigmoid(const Var<S>& x);

/// Softmax over the last axis, computed with max subtraction.
template <typename S>
Var<S> softmax_rows(const Var<S>& x);

/// Mean squared deviation over all elements (divisor = element count).
template <typename S>
Var<S> population_variance(const Var<S>& x);

/// population_variance applied independently to each slice x[b]; returns [B].
template <typename S>
Var<S> item_variance(const Var<S>& x);

/// y[b, ...] = x[b, ...] / sqrt(d[b] + eps) with d of shape [B].
template <typename S>
Var<S> divide_by_sqrt(const Var<S>& x, const Var<S>& d, S eps);

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape);

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, Index axis);

/// Half-open slice [begin, end) along `axis`.
template <typename S>
Var<S> slice(const Var<S>& x, Index axis, Index begin, Index end);

#define PBAN_DECLARE_OPS(S)                                                        \
    extern template Var<S> matmul(const Var<S>&, const Var<S>&);                   \
    extern template Var<S> bmm(const Var<S>&, const Var<S>&, bool, bool);          \
    extern template Var<S> add(const Var<S>&, const Var<S>&);                      \
    extern template Var<S> sub(const Var<S>&, const Var<S>&);                      \
    extern template Var<S> mul(const Var<S>&, const Var<S>&);                      \
    extern template Var<S> scale(const Var<S>&, S);                                \
    extern template Var<S> sum(const Var<S>&);                                     \
    extern template Var<S> mean(const Var<S>&);                                    \
    extern template Var<S> relu(const Var<S>&);                                    \
    extern template Var<S> sigmoid(const Var<S>&);                                 \
    extern template Var<S> softmax_rows(const Var<S>&);                            \
    extern template Var<S> population_variance(const Var<S>&);                     \
    extern template Var<S> item_variance(const Var<S>&);                           \
    extern template Var<S> divide_by_sqrt(const Var<S>&, const Var<S>&, S);        \
    extern template Var<S> reshape(const Var<S>&, Shape);                          \
    extern template Var<S> concat(const std::vector<Var<S>>&, Index);              \
    extern template Var<S> slice(const Var<S>&, Index, Index, Index);

PBAN_DECLARE_OPS(float)
PBAN_DECLARE_OPS(double)
#undef PBAN_DECLARE_OPS

}  // namespace pban
