#include "pban/model.hpp"

#include <algorithm>
#include <cmath>

#include "pban/ops.hpp"

namespace pban {

std::string to_string(AttentionMode mode) {
    switch (mode) {
        case AttentionMode::bidirectional: return "bidirectional";
        case AttentionMode::hr_to_sr: return "hr_to_sr";
        case AttentionMode::sr_to_hr: return "sr_to_hr";
        case AttentionMode::self: return "self";
        case AttentionMode::kv_homology: return "kv_homology";
    }
    return "?";
}

std::string to_string(Variant variant) { return variant == Variant::fr ? "FR" : "NR"; }

AttentionMode parse_attention_mode(const std::string& name) {
    for (auto m : {AttentionMode::bidirectional, AttentionMode::hr_to_sr, AttentionMode::sr_to_hr,
                   AttentionMode::self, AttentionMode::kv_homology}) {
        if (to_string(m) == name) return m;
    }
    throw ParameterError("unknown attention mode '" + name + "'");
}

Variant parse_variant(const std::string& name) {
    if (name == "FR" || name == "fr") return Variant::fr;
    if (name == "NR" || name == "nr") return Variant::nr;
    throw ParameterError("unknown variant '" + name + "' (expected FR or NR)");
}

namespace {

std::vector<std::string> branches_of(const PbanConfig& config) {
    if (config.variant == Variant::nr) return {"sr"};
    return {"hr", "sr"};
}

std::string block_prefix(Index block, const std::string& branch) {
    return "block" + std::to_string(block) + "." + branch + ".";
}

void require(bool ok, const std::string& message) {
    if (!ok) throw ParameterError("config: " + message);
}

}  // namespace

void PbanConfig::validate() const {
    require(channels >= 16 && channels % 16 == 0,
            "channels must be a positive multiple of 16, got " + std::to_string(channels));
    require(blocks >= 0, "blocks must be non-negative");
    require(gmdc_groups >= 1 && channels % gmdc_groups == 0, "gmdc_groups must divide channels");
    require(Index(gmdc_kernels.size()) == gmdc_groups,
            "gmdc_kernels must list one kernel per group");
    for (Index e : gmdc_kernels) require(e >= 1 && e % 2 == 1, "gmdc kernels must be odd");
    require(offset_kernel >= 1 && offset_kernel % 2 == 1, "offset_kernel must be odd");
    require(subec_upscale >= 1 && subec_upscale * subec_upscale <= channels,
            "subec_upscale^2 must not exceed channels");
    require(subec_groups >= 1 && channels % subec_groups == 0, "subec_groups must divide channels");
    require(patch_size >= 1 && pool_h >= 1 && pool_w >= 1 && pool_h <= patch_size &&
                pool_w <= patch_size,
            "pool size must fit in the patch");
    require(head_dims.size() >= 1 && head_dims[0] == channels * pool_h * pool_w,
            "head_dims[0] must equal channels * pool_h * pool_w = " +
                std::to_string(channels * pool_h * pool_w));
    const Index fusion_in = (variant == Variant::fr ? 2 : 1) * head_dims.back();
    require(fusion_dims.size() >= 2 && fusion_dims.front() == fusion_in,
            "fusion_dims[0] must equal " + std::to_string(fusion_in));
    require(fusion_dims.back() == 1, "fusion_dims must end in 1");
    for (Index d : head_dims) require(d >= 1, "head dims must be positive");
    for (Index d : fusion_dims) require(d >= 1, "fusion dims must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
    require(bn_momentum >= 0.0 && bn_momentum <= 1.0, "bn_momentum must be in [0,1]");
    require(bn_eps > 0.0, "bn_eps must be positive");
    require(variant == Variant::fr || attention == AttentionMode::self,
            "the NR variant uses self attention");
}

PbanConfig PbanConfig::no_reference() {
    PbanConfig c;
    c.variant = Variant::nr;
    c.attention = AttentionMode::self;
    c.fusion_dims = {256, 64, 1};
    return c;
}

PbanConfig PbanConfig::micro(Variant variant) {
    PbanConfig c;
    c.channels = 16;
    c.blocks = 1;
    c.head_dims = {256, 128, 64};
    c.variant = variant;
    if (variant == Variant::nr) {
        c.attention = AttentionMode::self;
        c.fusion_dims = {64, 32, 1};
    } else {
        c.fusion_dims = {128, 32, 1};
    }
    return c;
}

bool is_buffer(const std::string& name) {
    auto ends_with = [&](const std::string& suffix) {
        return name.size() >= suffix.size() &&
               name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return ends_with(".running_mean") || ends_with(".running_var");
}

std::map<std::string, Shape> weight_shapes(const PbanConfig& config) {
    config.validate();
    std::map<std::string, Shape> shapes;
    auto conv = [&](const std::string& prefix, const ConvSpec& spec) {
        shapes[prefix + ".weight"] = spec.weight_shape();
        shapes[prefix + ".bias"] = spec.bias_shape();
    };
    auto dense = [&](const std::string& prefix, Index in, Index out) {
        shapes[prefix + ".weight"] = {out, in};
        shapes[prefix + ".bias"] = {out};
    };
    const Index c = config.channels;
    const Index gc = c / config.gmdc_groups;
    const Index s = config.subec_upscale;
    for (const auto& br : branches_of(config)) {
        conv("encoder." + br + ".conv", {3, c, 3, 1});
        for (const char* t : {".weight", ".bias", ".running_mean", ".running_var"}) {
            shapes["encoder." + br + ".bn" + t] = {c};
        }
        for (Index b = 0; b < config.blocks; ++b) {
            const std::string p = block_prefix(b, br);
            for (const char* name : {"q_conv", "k_conv", "v_conv"}) {
                conv(p + "biatten." + name, {c, c, 3, 1});
            }
            for (Index g = 0; g < config.gmdc_groups; ++g) {
                const Index e = config.gmdc_kernels[std::size_t(g)];
                const std::string gp = p + "biatten.gmdc.group" + std::to_string(g);
                conv(gp + ".offset", {gc, 3 * e * e, config.offset_kernel, 1});
                conv(gp + ".dcn", {gc, gc, e, 1});
            }
            conv(p + "biatten.gmdc.pointwise", {c, c, 1, 1});
            conv(p + "subec.pixel_reduce", {c, c / 2, 3, 1});
            conv(p + "subec.pixel_expand", {c / 2, s * s, 3, 1});
            conv(p + "subec.channel_expand", {c, c * s, 1, config.subec_groups});
            conv(p + "subec.channel_compress", {c * s, c, 1, 1});
        }
        for (std::size_t l = 0; l + 1 < config.head_dims.size(); ++l) {
            dense("head." + br + ".fc" + std::to_string(l + 1), config.head_dims[l],
                  config.head_dims[l + 1]);
        }
    }
    for (std::size_t l = 0; l + 1 < config.fusion_dims.size(); ++l) {
        dense("head.fusion.fc" + std::to_string(l + 1), config.fusion_dims[l],
              config.fusion_dims[l + 1]);
    }
    return shapes;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string module_of(const std::string& name) { return name.substr(0, name.rfind('.')); }

}  // namespace

template <typename S>
NamedWeights<S> init_weights(const PbanConfig& config, std::uint64_t seed) {
    const auto shapes = weight_shapes(config);
    Rng rng(seed);
    NamedWeights<S> weights;
    for (const auto& [name, shape] : shapes) {
        Tensor<S> t(shape);
        const std::string module = module_of(name);
        if (module.find(".bn") != std::string::npos && module.rfind("encoder.", 0) == 0) {
            if (ends_with(name, ".weight") || ends_with(name, ".running_var")) t.vec().setOnes();
        } else if (ends_with(module, ".offset")) {
            if (ends_with(name, ".bias")) {
                // Channels [2K, 3K) are modulation logits.
                const Index k = t.size() / 3;
                t.vec().tail(k).setConstant(S(kModulationBiasInit));
            }
        } else {
            const Shape& ws = shapes.at(module + ".weight");
            Index fan_in = 1;
            for (std::size_t i = 1; i < ws.size(); ++i) fan_in *= ws[i];
            const double bound = 1.0 / std::sqrt(double(fan_in));
            for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.uniform(-bound, bound));
        }
        weights.emplace(name, std::move(t));
    }
    return weights;
}

template <typename S>
void tie_branch_weights(NamedWeights<S>& weights) {
    for (auto& [name, t] : weights) {
        const auto pos = name.find(".hr.");
        if (pos == std::string::npos) continue;
        std::string twin = name;
        twin.replace(pos, 4, ".sr.");
        auto it = weights.find(twin);
        if (it != weights.end()) it->second = t;
    }
}

ParamCount param_count(const PbanConfig& config) {
    ParamCount count;
    for (const auto& [name, shape] : weight_shapes(config)) {
        const Index n = shape_numel(shape);
        count.per_module[module_of(name)] += n;
        if (is_buffer(name)) count.buffers += n;
        else count.trainable += n;
    }
    const Index gc = config.channels / config.gmdc_groups;
    for (Index e : config.gmdc_kernels) count.gmdc_kernel_weights += gc * gc * e * e;
    return count;
}

template <typename S>
ParamSet<S>::ParamSet(NamedWeights<S>& weights, bool trainable)
    : weights_(&weights), trainable_(trainable), mutable_(true) {}

template <typename S>
ParamSet<S>::ParamSet(const NamedWeights<S>& weights)
    : weights_(const_cast<NamedWeights<S>*>(&weights)), trainable_(false), mutable_(false) {}

template <typename S>
const Var<S>& ParamSet<S>::operator()(const std::string& name) {
    auto cached = vars_.find(name);
    if (cached != vars_.end()) return cached->second;
    auto it = weights_->find(name);
    if (it == weights_->end()) throw LookupError("missing weight '" + name + "'");
    used_.insert(name);
    Var<S> v = trainable_ ? Var<S>::parameter(it->second) : Var<S>::constant(it->second);
    return vars_.emplace(name, std::move(v)).first->second;
}

template <typename S>
void ParamSet<S>::bind(const std::string& name, Var<S> var) {
    auto it = weights_->find(name);
    if (it == weights_->end()) throw LookupError("missing weight '" + name + "'");
    if (it->second.shape() != var.shape())
        throw DimensionError("bound tensor '" + name + "' has shape " + shape_str(var.shape()) + ", expected " +
                             shape_str(it->second.shape()));
    used_.insert(name);
    vars_.insert_or_assign(name, std::move(var));
}

template <typename S>
BatchNormStats<S> ParamSet<S>::bn_stats(const std::string& prefix) {
    BatchNormStats<S> stats;
    for (auto [suffix, slot] : {std::pair{".running_mean", &stats.running_mean},
                                std::pair{".running_var", &stats.running_var}}) {
        auto it = weights_->find(prefix + suffix);
        if (it == weights_->end()) throw LookupError("missing buffer '" + prefix + suffix + "'");
        used_.insert(prefix + suffix);
        *slot = &it->second;
    }
    return stats;
}

template <typename S>
NamedWeights<S> ParamSet<S>::gradients(const Gradients<S>& grads) const {
    NamedWeights<S> out;
    for (const auto& [name, t] : *weights_) {
        if (is_buffer(name)) continue;
        auto it = vars_.find(name);
        out.emplace(name, it == vars_.end() ? Tensor<S>::zeros(t.shape()) : grads[it->second]);
    }
    return out;
}

const std::array<std::string, 5>& feature_stage_names() {
    static const std::array<std::string, 5> names{
        "image before PBA", "K after GMDC", "after Bi-Atten", "after SubEC", "after PBA block"};
    return names;
}

namespace {

template <typename S>
Var<S> conv(ForwardContext<S>& ctx, const std::string& prefix, const Var<S>& x,
            const ConvSpec& spec) {
    return conv2d(x, ctx.params(prefix + ".weight"), ctx.params(prefix + ".bias"), spec);
}

template <typename S>
void record(ForwardContext<S>& ctx, Index block, const std::string& branch, int stage,
            const Var<S>& x) {
    if (!ctx.tap) return;
    const Index c = x.dim(1), h = x.dim(2), w = x.dim(3);
    FeatureRecord rec{block, branch, stage, h, w, std::vector<double>(std::size_t(h * w), 0.0)};
    for (Index ch = 0; ch < c; ++ch) {
        for (Index p = 0; p < h * w; ++p) rec.values[std::size_t(p)] += double(x.value()[ch * h * w + p]);
    }
    for (auto& v : rec.values) v /= double(c);
    ctx.tap->push_back(std::move(rec));
}

template <typename S>
Var<S> dropout_layer(ForwardContext<S>& ctx, const Var<S>& x) {
    if (ctx.mode == Mode::eval || ctx.config.dropout == 0.0) return x;
    if (!ctx.rng) throw ContractError("train-mode dropout requires a random stream");
    return dropout(x, ctx.config.dropout, *ctx.rng, ctx.mode);
}

template <typename S>
Var<S> tokens(const Var<S>& x) {
    return reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)});
}

template <typename S>
Var<S> attend(const Var<S>& q, const Var<S>& k, const Var<S>& v) {
    auto out = variance_scaled_attention(tokens(q), tokens(k), tokens(v), S(1e-8));
    return reshape(out, q.shape());
}

template <typename S>
struct BranchQkv {
    Var<S> q, k, v;
};

template <typename S>
BranchQkv<S> project_qkv(ForwardContext<S>& ctx, Index block, const std::string& branch,
                         const Var<S>& x) {
    const Index c = ctx.config.channels;
    const std::string p = block_prefix(block, branch) + "biatten.";
    const ConvSpec spec{c, c, 3, 1};
    BranchQkv<S> out;
    out.q = conv(ctx, p + "q_conv", x, spec);
    out.k = gmdc_forward(ctx, p + "gmdc", conv(ctx, p + "k_conv", x, spec));
    out.v = conv(ctx, p + "v_conv", x, spec);
    record(ctx, block, branch, 1, out.k);
    return out;
}

template <typename S>
void check_pair(const Var<S>& a, const Var<S>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": HR " + shape_str(a.shape()) + " and SR " +
                             shape_str(b.shape()) + " differ");
    }
}

template <typename S>
Var<S> branch_head(ForwardContext<S>& ctx, const std::string& branch, const Var<S>& o) {
    const auto& cfg = ctx.config;
    Var<S> h = adaptive_avg_pool(o, cfg.pool_h, cfg.pool_w);
    h = reshape(h, {h.dim(0), h.dim(1) * cfg.pool_h * cfg.pool_w});
    for (std::size_t l = 0; l + 1 < cfg.head_dims.size(); ++l) {
        const std::string p = "head." + branch + ".fc" + std::to_string(l + 1);
        h = relu(linear(h, ctx.params(p + ".weight"), ctx.params(p + ".bias")));
        h = dropout_layer(ctx, h);
    }
    return h;
}

template <typename S>
Var<S> fusion(ForwardContext<S>& ctx, Var<S> h) {
    for (std::size_t l = 0; l + 1 < ctx.config.fusion_dims.size(); ++l) {
        const std::string p = "head.fusion.fc" + std::to_string(l + 1);
        h = linear(h, ctx.params(p + ".weight"), ctx.params(p + ".bias"));
    }
    return h;
}

}  // namespace

template <typename S>
Var<S> encoder_forward(ForwardContext<S>& ctx, const std::string& branch, const Var<S>& patch) {
    const auto& cfg = ctx.config;
    const Shape& s = patch.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg.patch_size || s[3] != cfg.patch_size) {
        throw DimensionError("encoder: expected [B,3," + std::to_string(cfg.patch_size) + "," +
                             std::to_string(cfg.patch_size) + "] patch, got " + shape_str(s));
    }
    if (ctx.mode == Mode::train && !ctx.params.mutable_buffers()) {
        throw ContractError("train mode needs mutable batch-norm statistics");
    }
    const std::string p = "encoder." + branch;
    Var<S> x = conv(ctx, p + ".conv", patch, ConvSpec{3, cfg.channels, 3, 1});
    BatchNormOptions bn{cfg.bn_momentum, cfg.bn_eps};
    x = batch_norm(x, ctx.params(p + ".bn.weight"), ctx.params(p + ".bn.bias"),
                   ctx.params.bn_stats(p + ".bn"), ctx.mode, bn);
    return relu(x);
}

template <typename S>
Var<S> gmdc_forward(ForwardContext<S>& ctx, const std::string& prefix, const Var<S>& x) {
    const auto& cfg = ctx.config;
    const Index c = x.dim(1);
    const Index n = cfg.gmdc_groups;
    if (n < 1 || c % n != 0 || Index(cfg.gmdc_kernels.size()) != n) {
        throw ParameterError("gmdc: " + std::to_string(n) + " groups incompatible with " +
                             std::to_string(c) + " channels / kernel list");
    }
    const Index gc = c / n;
    std::vector<Var<S>> parts;
    for (Index g = 0; g < n; ++g) {
        const Index e = cfg.gmdc_kernels[std::size_t(g)];
        const Index k2 = e * e;
        const std::string gp = prefix + ".group" + std::to_string(g);
        Var<S> xg = slice(x, 1, g * gc, (g + 1) * gc);
        Var<S> raw = conv(ctx, gp + ".offset", xg, ConvSpec{gc, 3 * k2, cfg.offset_kernel, 1});
        DeformField<S> field{slice(raw, 1, 0, 2 * k2), sigmoid(slice(raw, 1, 2 * k2, 3 * k2))};
        parts.push_back(deform_conv2d(xg, ctx.params(gp + ".dcn.weight"),
                                      ctx.params(gp + ".dcn.bias"), ConvSpec{gc, gc, e, 1}, field));
    }
    Var<S> merged = parts.size() == 1 ? parts.front() : concat(parts, 1);
    return conv(ctx, prefix + ".pointwise", merged, ConvSpec{c, c, 1, 1});
}

template <typename S>
BranchPair<S> bi_atten_forward(ForwardContext<S>& ctx, Index block, const Var<S>& x_hr,
                               const Var<S>& x_sr, AttentionMode mode) {
    check_pair(x_hr, x_sr, "bi-atten");
    const auto hr = project_qkv(ctx, block, "hr", x_hr);
    const auto sr = project_qkv(ctx, block, "sr", x_sr);
    // Key (and value) sources per branch.
    Var<S> k_hr = sr.k, k_sr = hr.k, v_hr = hr.v, v_sr = sr.v;
    switch (mode) {
        case AttentionMode::bidirectional: break;
        case AttentionMode::self:
            k_hr = hr.k;
            k_sr = sr.k;
            break;
        case AttentionMode::hr_to_sr: k_sr = sr.k; break;
        case AttentionMode::sr_to_hr: k_hr = hr.k; break;
        case AttentionMode::kv_homology:
            v_hr = sr.v;
            v_sr = hr.v;
            break;
    }
    BranchPair<S> out{attend(hr.q, k_hr, v_hr), attend(sr.q, k_sr, v_sr)};
    record(ctx, block, "hr", 2, out.first);
    record(ctx, block, "sr", 2, out.second);
    return out;
}

template <typename S>
Var<S> subec_forward(ForwardContext<S>& ctx, const std::string& prefix, const Var<S>& x) {
    const auto& cfg = ctx.config;
    const Index c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Index s = cfg.subec_upscale, g = cfg.subec_groups;
    if (c % g != 0 || s * s > c || c % 2 != 0) {
        throw ParameterError("subec: upscale " + std::to_string(s) + " / groups " +
                             std::to_string(g) + " incompatible with " + std::to_string(c) +
                             " channels");
    }
    // Sub-pixel weight [B,1,H,W].
    Var<S> px = relu(conv(ctx, prefix + ".pixel_reduce", x, ConvSpec{c, c / 2, 3, 1}));
    px = conv(ctx, prefix + ".pixel_expand", px, ConvSpec{c / 2, s * s, 3, 1});
    px = adaptive_avg_pool(pixel_shuffle(px, s), h, w);
    // Sub-channel weight [B,C,1,1].
    Var<S> ch = adaptive_avg_pool(x, 1, 1);
    ch = conv(ctx, prefix + ".channel_expand", ch, ConvSpec{c, c * s, 1, g});
    ch = channel_shuffle(ch, g);
    ch = conv(ctx, prefix + ".channel_compress", ch, ConvSpec{c * s, c, 1, 1});
    return mul(mul(x, ch), px);
}

template <typename S>
BranchPair<S> pba_block_forward(ForwardContext<S>& ctx, Index block, const Var<S>& x_hr,
                                const Var<S>& x_sr, AttentionMode mode) {
    record(ctx, block, "hr", 0, x_hr);
    record(ctx, block, "sr", 0, x_sr);
    auto [a_hr, a_sr] = bi_atten_forward(ctx, block, x_hr, x_sr, mode);
    Var<S> s_hr = subec_forward(ctx, block_prefix(block, "hr") + "subec", a_hr);
    Var<S> s_sr = subec_forward(ctx, block_prefix(block, "sr") + "subec", a_sr);
    record(ctx, block, "hr", 3, s_hr);
    record(ctx, block, "sr", 3, s_sr);
    BranchPair<S> out{add(s_hr, x_hr), add(s_sr, x_sr)};
    record(ctx, block, "hr", 4, out.first);
    record(ctx, block, "sr", 4, out.second);
    return out;
}

template <typename S>
Var<S> quality_head_forward(ForwardContext<S>& ctx, const Var<S>& o_hr, const Var<S>& o_sr) {
    check_pair(o_hr, o_sr, "quality head");
    Var<S> h_hr = branch_head(ctx, "hr", o_hr);
    Var<S> h_sr = branch_head(ctx, "sr", o_sr);
    return fusion(ctx, concat(std::vector<Var<S>>{h_hr, h_sr}, 1));
}

template <typename S>
Var<S> pban_forward(ForwardContext<S>& ctx, const Var<S>& hr_patch, const Var<S>& sr_patch) {
    if (ctx.config.variant != Variant::fr) throw ParameterError("pban_forward needs variant FR");
    check_pair(hr_patch, sr_patch, "pban");
    Var<S> x_hr = encoder_forward(ctx, "hr", hr_patch);
    Var<S> x_sr = encoder_forward(ctx, "sr", sr_patch);
    for (Index b = 0; b < ctx.config.blocks; ++b) {
        std::tie(x_hr, x_sr) = pba_block_forward(ctx, b, x_hr, x_sr, ctx.config.attention);
    }
    return quality_head_forward(ctx, x_hr, x_sr);
}

template <typename S>
Var<S> pban_nr_forward(ForwardContext<S>& ctx, const Var<S>& patch) {
    if (ctx.config.variant != Variant::nr) throw ParameterError("pban_nr_forward needs variant NR");
    Var<S> x = encoder_forward(ctx, "sr", patch);
    for (Index b = 0; b < ctx.config.blocks; ++b) {
        record(ctx, b, "sr", 0, x);
        const auto qkv = project_qkv(ctx, b, "sr", x);
        Var<S> a = attend(qkv.q, qkv.k, qkv.v);
        record(ctx, b, "sr", 2, a);
        Var<S> s = subec_forward(ctx, block_prefix(b, "sr") + "subec", a);
        record(ctx, b, "sr", 3, s);
        x = add(s, x);
        record(ctx, b, "sr", 4, x);
    }
    return fusion(ctx, branch_head(ctx, "sr", x));
}

template <typename S>
Var<S> model_forward(ForwardContext<S>& ctx, const Var<S>& hr_patch, const Var<S>& sr_patch) {
    if (ctx.config.variant == Variant::nr) return pban_nr_forward(ctx, sr_patch);
    return pban_forward(ctx, hr_patch, sr_patch);
}

#define PBAN_INSTANTIATE_MODEL(S)                                                              \
    template NamedWeights<S> init_weights<S>(const PbanConfig&, std::uint64_t);                \
    template void tie_branch_weights(NamedWeights<S>&);                                        \
    template class ParamSet<S>;                                                                \
    template Var<S> encoder_forward(ForwardContext<S>&, const std::string&, const Var<S>&);    \
    template Var<S> gmdc_forward(ForwardContext<S>&, const std::string&, const Var<S>&);       \
    template BranchPair<S> bi_atten_forward(ForwardContext<S>&, Index, const Var<S>&,          \
                                            const Var<S>&, AttentionMode);                     \
    template Var<S> subec_forward(ForwardContext<S>&, const std::string&, const Var<S>&);      \
    template BranchPair<S> pba_block_forward(ForwardContext<S>&, Index, const Var<S>&,         \
                                             const Var<S>&, AttentionMode);                    \
    template Var<S> quality_head_forward(ForwardContext<S>&, const Var<S>&, const Var<S>&);    \
    template Var<S> pban_forward(ForwardContext<S>&, const Var<S>&, const Var<S>&);            \
    template Var<S> pban_nr_forward(ForwardContext<S>&, const Var<S>&);                        \
    template Var<S> model_forward(ForwardContext<S>&, const Var<S>&, const Var<S>&);

PBAN_INSTANTIATE_MODEL(float)
PBAN_INSTANTIATE_MODEL(double)

}  // namespace pban
