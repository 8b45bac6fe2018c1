#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pban/autodiff.hpp"
#include "pban/nn.hpp"
#include "pban/random.hpp"

namespace pban {

enum class AttentionMode { bidirectional, hr_to_sr, sr_to_hr, self, kv_homology };
enum class Variant { fr, nr };

std::string to_string(AttentionMode mode);
std::string to_string(Variant variant);
AttentionMode parse_attention_mode(const std::string& name);
Variant parse_variant(const std::string& name);

/// Architecture hyperparameters. Defaults give the full-reference network
/// with a 1024-wide head input (64 channels pooled to 4x4).
struct PbanConfig {
    Index channels = 64;
    Index blocks = 4;
    std::vector<Index> gmdc_kernels{3, 7};
    Index gmdc_groups = 2;
    Index offset_kernel = 3;
    Index subec_upscale = 2;
    Index subec_groups = 2;
    Index pool_h = 4;
    Index pool_w = 4;
    std::vector<Index> head_dims{1024, 512, 256};
    std::vector<Index> fusion_dims{512, 64, 1};
    double dropout = 0.5;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    Index patch_size = 32;
    AttentionMode attention = AttentionMode::bidirectional;
    Variant variant = Variant::fr;

    /// Throws ParameterError on any violated constraint.
    void validate() const;

    /// Defaults adjusted for the single-branch no-reference variant.
    static PbanConfig no_reference();
    /// 16 channels, one block; used by gradient and overfit checks.
    static PbanConfig micro(Variant variant = Variant::fr);

    bool operator==(const PbanConfig&) const = default;
};

/// Parameter path -> tensor, iterated lexicographically.
template <typename S>
using NamedWeights = std::map<std::string, Tensor<S>>;

/// Running statistics are stored alongside parameters but are not trained.
bool is_buffer(const std::string& name);

/// Shapes of every tensor the configured network consumes.
std::map<std::string, Shape> weight_shapes(const PbanConfig& config);

/// Kaiming-uniform (bound 1/sqrt(fan_in)) conv/linear weights and biases;
/// BN gamma 1, beta 0, running mean 0, running var 1; offset predictors zero
/// with modulation logits biased so the initial mask is 1.
template <typename S>
NamedWeights<S> init_weights(const PbanConfig& config, std::uint64_t seed);

/// Logit bias of the modulation channels at initialisation. sigmoid of this
/// rounds to 1 in single precision.
inline constexpr double kModulationBiasInit = 18.0;

template <typename To, typename From>
NamedWeights<To> cast_weights(const NamedWeights<From>& weights) {
    NamedWeights<To> out;
    for (const auto& [name, t] : weights) out.emplace(name, t.template cast<To>());
    return out;
}

/// Copies every HR-branch tensor onto its SR counterpart.
template <typename S>
void tie_branch_weights(NamedWeights<S>& weights);

struct ParamCount {
    std::map<std::string, Index> per_module;  // tensor path minus its last component
    Index trainable = 0;
    Index buffers = 0;
    Index total() const { return trainable + buffers; }
    /// Deformable kernel weights of a single GMDC instance.
    Index gmdc_kernel_weights = 0;
};

ParamCount param_count(const PbanConfig& config);

/// Binds NamedWeights to graph leaves. Tracks which names the forward pass
/// consumed so orphaned tensors can be detected.
template <typename S>
class ParamSet {
public:
    /// Mutable binding: running statistics may be updated in train mode.
    ParamSet(NamedWeights<S>& weights, bool trainable);
    /// Read-only binding for inference; train-mode batch norm is rejected.
    explicit ParamSet(const NamedWeights<S>& weights);

    const Var<S>& operator()(const std::string& name);
    /// Uses `var` in place of the stored tensor `name` (shapes must match).
    void bind(const std::string& name, Var<S> var);
    BatchNormStats<S> bn_stats(const std::string& prefix);
    bool mutable_buffers() const { return mutable_; }

    const std::set<std::string>& used() const { return used_; }
    /// Gradient of every trainable tensor (zeros if unused by the graph).
    NamedWeights<S> gradients(const Gradients<S>& grads) const;

private:
    NamedWeights<S>* weights_;
    bool trainable_;
    bool mutable_;
    std::map<std::string, Var<S>> vars_;
    std::set<std::string> used_;
};

/// Channel-mean snapshots of intermediate maps, per block and branch.
struct FeatureRecord {
    Index block;
    std::string branch;
    int stage;  // index into feature_stage_names()
    Index height, width;
    std::vector<double> values;  // channel mean of batch item 0, row-major
};

const std::array<std::string, 5>& feature_stage_names();

template <typename S>
struct ForwardContext {
    ParamSet<S>& params;
    const PbanConfig& config;
    Mode mode = Mode::eval;
    Rng* rng = nullptr;
    std::vector<FeatureRecord>* tap = nullptr;
};

template <typename S>
using BranchPair = std::pair<Var<S>, Var<S>>;

/// conv 3x3 (3 -> C) -> batch norm -> ReLU.
template <typename S>
Var<S> encoder_forward(ForwardContext<S>& ctx, const std::string& branch, const Var<S>& patch);

/// Grouped multi-scale deformable convolution followed by point-wise fusion.
template <typename S>
Var<S> gmdc_forward(ForwardContext<S>& ctx, const std::string& prefix, const Var<S>& x);

/// Q/K/V projections, GMDC on K, then variance-scaled attention with keys
/// (and, in kv_homology mode, values) routed between branches per the mode.
template <typename S>
BranchPair<S> bi_atten_forward(ForwardContext<S>& ctx, Index block, const Var<S>& x_hr,
                               const Var<S>& x_sr, AttentionMode mode);

/// x * W_channel * W_pixel.
template <typename S>
Var<S> subec_forward(ForwardContext<S>& ctx, const std::string& prefix, const Var<S>& x);

template <typename S>
BranchPair<S> pba_block_forward(ForwardContext<S>& ctx, Index block, const Var<S>& x_hr,
                                const Var<S>& x_sr, AttentionMode mode);

/// Two-branch head; returns [B,1].
template <typename S>
Var<S> quality_head_forward(ForwardContext<S>& ctx, const Var<S>& o_hr, const Var<S>& o_sr);

template <typename S>
Var<S> pban_forward(ForwardContext<S>& ctx, const Var<S>& hr_patch, const Var<S>& sr_patch);

template <typename S>
Var<S> pban_nr_forward(ForwardContext<S>& ctx, const Var<S>& patch);

/// Dispatches on config.variant; the NR variant ignores `hr_patch`.
template <typename S>
Var<S> model_forward(ForwardContext<S>& ctx, const Var<S>& hr_patch, const Var<S>& sr_patch);

}  // namespace pban
