#pragma once

#include "pban/autodiff.hpp"

namespace pban {

/// (1/B) * sum_b (pred[b] - target[b])^2 for pred [B,1] (or [B]) and target [B].
template <typename S>
Var<S> mse_loss(const Var<S>& pred, const Tensor<S>& target);

extern template Var<float> mse_loss(const Var<float>&, const Tensor<float>&);
extern template Var<double> mse_loss(const Var<double>&, const Tensor<double>&);

}  // namespace pban
