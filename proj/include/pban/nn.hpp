#pragma once

#include "pban/autodiff.hpp"
#include "pban/random.hpp"

namespace pban {

enum class Mode { train, eval };

/// Stride-1 convolution with "same" zero padding (kernel - 1) / 2.
struct ConvSpec {
    Index in_channels = 0;
    Index out_channels = 0;
    Index kernel = 3;
    Index groups = 1;

    Index padding() const { return (kernel - 1) / 2; }
    Shape weight_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }
    Shape bias_shape() const { return {out_channels}; }
    /// Throws ParameterError unless kernel is odd and groups divides both channel counts.
    void validate() const;
};

/// Per-pixel sampling displacements for a deformable convolution.
/// offsets: [B, 2K, H, W] with channel 2k = vertical, 2k+1 = horizontal
/// displacement of sample point k = ky * E + kx (K = E * E).
/// modulation: [B, K, H, W], expected in [0, 1].
template <typename S>
struct DeformField {
    Var<S> offsets;
    Var<S> modulation;
};

/// Cross-correlation, stride 1, zero padding. `bias` may be undefined.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const ConvSpec& spec);

/// Bilinear interpolation of x [C,H,W] at fractional (py, px), both rank-0.
/// Neighbours outside the image read as zero.
template <typename S>
Var<S> bilinear_sample(const Var<S>& x, const Var<S>& py, const Var<S>& px);

/// Modulated deformable convolution. With zero offsets and unit modulation
/// this reduces to conv2d.
template <typename S>
Var<S> deform_conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias,
                     const ConvSpec& spec, const DeformField<S>& field);

/// [B, c*s*s, H, W] -> [B, c, s*H, s*W].
template <typename S>
Var<S> pixel_shuffle(const Var<S>& x, Index factor);

/// Inverse of pixel_shuffle.
template <typename S>
Var<S> pixel_unshuffle(const Var<S>& x, Index factor);

/// Reshape channels to (groups, C/groups), transpose, flatten.
template <typename S>
Var<S> channel_shuffle(const Var<S>& x, Index groups);

/// Window [floor(i*H/oh), ceil((i+1)*H/oh)) averaging; target must not exceed input.
template <typename S>
Var<S> adaptive_avg_pool(const Var<S>& x, Index out_h, Index out_w);

template <typename S>
struct BatchNormStats {
    Tensor<S>* running_mean = nullptr;
    Tensor<S>* running_var = nullptr;
};

struct BatchNormOptions {
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel normalisation over (B, H, W). Train mode uses the batch's
/// population statistics and updates the running estimates in place.
template <typename S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, BatchNormStats<S> stats,
                  Mode mode, const BatchNormOptions& options = {});

/// x [B,d] -> x W^T + b with W [d', d], b [d'].
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);

/// Inverted dropout. Identity in eval mode or when p == 0.
template <typename S>
Var<S> dropout(const Var<S>& x, double p, Rng& rng, Mode mode);

/// softmax(logits / sqrt(Var(logits) + eps)) applied to value tokens, with
/// logits = Q^T K per batch item. q, k, v are [B, C, N] (N tokens of width
/// C); returns [B, C, N]. The variance is taken over all N*N logits of each
/// item. Only the attention probabilities are retained for the backward pass.
template <typename S>
Var<S> variance_scaled_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, S eps);

/// Attention probabilities [B, N, N] of variance_scaled_attention (no graph).
template <typename S>
Tensor<S> attention_map(const Tensor<S>& q, const Tensor<S>& k, S eps);

#define PBAN_DECLARE_NN(S)                                                                     \
    extern template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, const ConvSpec&); \
    extern template Var<S> bilinear_sample(const Var<S>&, const Var<S>&, const Var<S>&);       \
    extern template Var<S> deform_conv2d(const Var<S>&, const Var<S>&, const Var<S>&,          \
                                         const ConvSpec&, const DeformField<S>&);              \
    extern template Var<S> pixel_shuffle(const Var<S>&, Index);                                \
    extern template Var<S> pixel_unshuffle(const Var<S>&, Index);                              \
    extern template Var<S> channel_shuffle(const Var<S>&, Index);                              \
    extern template Var<S> adaptive_avg_pool(const Var<S>&, Index, Index);                     \
    extern template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&,             \
                                      BatchNormStats<S>, Mode, const BatchNormOptions&);       \
    extern template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                \
    extern template Var<S> dropout(const Var<S>&, double, Rng&, Mode);                         \
    extern template Var<S> variance_scaled_attention(const Var<S>&, const Var<S>&,             \
                                                     const Var<S>&, S);                        \
    extern template Tensor<S> attention_map(const Tensor<S>&, const Tensor<S>&, S);

PBAN_DECLARE_NN(float)
PBAN_DECLARE_NN(double)
#undef PBAN_DECLARE_NN

}  // namespace pban
