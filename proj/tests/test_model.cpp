#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "pban/features.hpp"
#include "pban/image.hpp"
#include "pban/model.hpp"
#include "pban/nn.hpp"
#include "pban/ops.hpp"

using namespace pban;
using namespace pban::test;

namespace {

PbanConfig small_config(Index blocks = 1, Index patch = 8) {
    PbanConfig c = PbanConfig::micro();
    c.blocks = blocks;
    c.patch_size = patch;
    return c;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

void zero_matching(NamedWeights<double>& w, const std::string& prefix) {
    for (auto& [name, t] : w)
        if (starts_with(name, prefix)) t.vec().setZero();
}

TensorD patch(Rng& rng, Index batch, Index size) { return random_tensor({batch, 3, size, size}, rng, 0.0, 1.0); }

}  // namespace

TEST_SUITE("pban-model") {

TEST_CASE("config validation") {
    CHECK_NOTHROW(PbanConfig{}.validate());
    CHECK_NOTHROW(PbanConfig::micro().validate());
    CHECK_NOTHROW(PbanConfig::no_reference().validate());
    PbanConfig c;
    c.channels = 40;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = PbanConfig{};
    c.head_dims[0] = 512;
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = PbanConfig{};
    c.gmdc_kernels = {3, 4};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = PbanConfig{};
    c.gmdc_kernels = {3, 5, 7};
    CHECK_THROWS_AS(c.validate(), ParameterError);
    CHECK_THROWS_AS(parse_attention_mode("sideways"), ParameterError);
    CHECK(parse_attention_mode(to_string(AttentionMode::kv_homology)) == AttentionMode::kv_homology);
}

TEST_CASE("init_weights matches weight_shapes and is seeded") {
    const PbanConfig c = PbanConfig::micro();
    const auto shapes = weight_shapes(c);
    const auto a = init_weights<float>(c, 7), b = init_weights<float>(c, 7), d = init_weights<float>(c, 8);
    REQUIRE(a.size() == shapes.size());
    for (const auto& [name, t] : a) CHECK(shapes.at(name) == t.shape());
    CHECK(a == b);
    CHECK(a != d);
    for (const auto& [name, t] : a) {
        if (name.find(".offset.weight") != std::string::npos) CHECK(t.vec().isZero());
        if (name.find("running_var") != std::string::npos) CHECK(t == TensorF::ones(t.shape()));
        if (name.find("running_mean") != std::string::npos) CHECK(t.vec().isZero());
    }
    const TensorF& ob = a.at("block0.hr.biatten.gmdc.group1.offset.bias");  // 3 * 49 channels
    for (Index i = 0; i < 98; ++i) CHECK(ob[i] == 0.0f);
    for (Index i = 98; i < 147; ++i) CHECK(ob[i] == float(kModulationBiasInit));
    CHECK(1.0f / (1.0f + std::exp(-float(kModulationBiasInit))) == 1.0f);
}

TEST_CASE("every tensor is consumed by the forward pass") {
    for (const PbanConfig& base : {PbanConfig::micro(), PbanConfig::micro(Variant::nr)}) {
        PbanConfig c = base;
        c.patch_size = 8;
        auto w = init_weights<double>(c, 1);
        ParamSet<double> params(w, true);
        ForwardContext<double> ctx{params, c, Mode::eval};
        Rng rng(1);
        model_forward(ctx, constant(patch(rng, 1, 8)), constant(patch(rng, 1, 8)));
        CHECK(params.used().size() == w.size());
    }
}

TEST_CASE("encoder") {
    PbanConfig c = small_config();
    auto w = init_weights<double>(c, 2);
    w.at("encoder.hr.conv.bias").vec().setZero();
    ParamSet<double> params(w, true);
    ForwardContext<double> ctx{params, c, Mode::train};
    CHECK(encoder_forward(ctx, "hr", constant(TensorD({2, 3, 8, 8}))).value().vec().isZero());

    Rng rng(2);
    const TensorD y = encoder_forward(ctx, "hr", constant(patch(rng, 2, 8))).value();
    CHECK(y.shape() == Shape{2, 16, 8, 8});
    CHECK(y.vec().minCoeff() >= 0.0);
    CHECK_THROWS_AS(encoder_forward(ctx, "hr", constant(TensorD({1, 3, 9, 8}))), DimensionError);

    PbanConfig full;
    auto wf = init_weights<float>(full, 2);
    ParamSet<float> pf(wf);
    ForwardContext<float> cf{pf, full, Mode::eval};
    CHECK(encoder_forward(cf, "sr", constant(TensorF({1, 3, 32, 32}))).value().shape() == Shape{1, 64, 32, 32});
}

TEST_CASE("gmdc at initialisation equals grouped conv followed by point-wise conv") {
    const PbanConfig c = small_config();
    Rng rng(3);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto w = init_weights<double>(c, seed);
        ParamSet<double> params(w, false);
        ForwardContext<double> ctx{params, c, Mode::eval};
        const std::string p = "block0.sr.biatten.gmdc";
        const TensorD x = random_tensor({2, 16, 8, 8}, rng);
        const TensorD got = gmdc_forward(ctx, p, constant(x)).value();

        // Oracle: each group of 8 channels through a plain conv with its own kernel.
        TensorD merged({2, 16, 8, 8});
        for (Index g = 0; g < 2; ++g) {
            const TensorD xs = slice(constant(x), 1, g * 8, g * 8 + 8).value();
            const std::string gp = p + ".group" + std::to_string(g) + ".dcn";
            const TensorD part = naive_conv(xs, w.at(gp + ".weight"), &w.at(gp + ".bias"), 1);
            for (Index b = 0; b < 2; ++b)
                for (Index i = 0; i < 8 * 64; ++i) merged[(b * 16 + g * 8) * 64 + i] = part[b * 8 * 64 + i];
        }
        const TensorD expect = naive_conv(merged, w.at(p + ".pointwise.weight"), &w.at(p + ".pointwise.bias"), 1);
        CHECK(max_abs_diff(got, expect) < 1e-6);
        CHECK(got.shape() == x.shape());
    }
}

TEST_CASE("parameter accounting") {
    const ParamCount pc = param_count(PbanConfig{});
    // Two groups of 32 channels with 3x3 and 7x7 kernels.
    const Index grouped = 32 * 32 * 9 + 32 * 32 * 49;
    CHECK(grouped == 59392);
    CHECK(pc.gmdc_kernel_weights == grouped);

    PbanConfig dcn;
    dcn.gmdc_kernels = {7};
    dcn.gmdc_groups = 1;
    CHECK(param_count(dcn).gmdc_kernel_weights == 64 * 64 * 49);
    CHECK(pc.gmdc_kernel_weights < param_count(dcn).gmdc_kernel_weights);

    const auto w = init_weights<float>(PbanConfig{}, 0);
    Index trainable = 0, buffers = 0;
    for (const auto& [name, t] : w) (is_buffer(name) ? buffers : trainable) += t.size();
    CHECK(pc.trainable == trainable);
    CHECK(pc.buffers == buffers);
    Index modules = 0;
    for (const auto& [m, n] : pc.per_module) modules += n;
    CHECK(modules == pc.total());
}

TEST_CASE("parameter count grows with the kernel list") {
    // 48 channels split evenly into 1..4 groups.
    Index previous = 0;
    for (const std::vector<Index>& kernels :
         {std::vector<Index>{3}, std::vector<Index>{3, 5}, std::vector<Index>{3, 5, 7}, std::vector<Index>{3, 5, 7, 9}}) {
        PbanConfig c;
        c.channels = 48;
        c.head_dims[0] = 48 * 16;
        c.gmdc_kernels = kernels;
        c.gmdc_groups = Index(kernels.size());
        const Index total = param_count(c).trainable;
        CHECK(total > previous);
        previous = total;
    }
}

TEST_CASE("bi-atten branch symmetry") {
    const PbanConfig c = small_config();
    auto w = init_weights<double>(c, 4);
    tie_branch_weights(w);
    Rng rng(4);
    const TensorD x = random_tensor({2, 16, 8, 8}, rng);
    std::vector<TensorD> outputs;
    for (AttentionMode mode : {AttentionMode::bidirectional, AttentionMode::hr_to_sr, AttentionMode::sr_to_hr,
                               AttentionMode::self, AttentionMode::kv_homology}) {
        ParamSet<double> params(w, false);
        ForwardContext<double> ctx{params, c, Mode::eval};
        auto [hr, sr] = bi_atten_forward(ctx, 0, constant(x), constant(x), mode);
        CHECK(hr.value() == sr.value());
        outputs.push_back(hr.value());
    }
    for (const auto& o : outputs) CHECK(o == outputs.front());
}

TEST_CASE("attention modes route keys between branches") {
    const PbanConfig c = small_config();
    auto w = init_weights<double>(c, 5);
    Rng rng(5);
    const TensorD a = random_tensor({1, 16, 8, 8}, rng), b = random_tensor({1, 16, 8, 8}, rng);
    auto run = [&](AttentionMode mode) {
        ParamSet<double> params(w, false);
        ForwardContext<double> ctx{params, c, Mode::eval};
        auto [hr, sr] = bi_atten_forward(ctx, 0, constant(a), constant(b), mode);
        return std::pair{hr.value(), sr.value()};
    };
    const auto bi = run(AttentionMode::bidirectional), self = run(AttentionMode::self);
    const auto h2s = run(AttentionMode::hr_to_sr), s2h = run(AttentionMode::sr_to_hr);
    // One-way modes keep one branch's own key.
    CHECK(h2s.first == bi.first);
    CHECK(h2s.second == self.second);
    CHECK(s2h.first == self.first);
    CHECK(s2h.second == bi.second);
    CHECK(max_abs_diff(bi.first, self.first) > 1e-9);
}

TEST_CASE("attention map is invariant to scaling the query") {
    Rng rng(6);
    const TensorF q = random_tensor<float>({2, 16, 64}, rng), k = random_tensor<float>({2, 16, 64}, rng);
    const TensorF base = attention_map(q, k, 1e-8f);
    for (float alpha : {0.1f, 3.0f, 100.0f}) {
        TensorF qa = q;
        qa.vec() *= alpha;
        CHECK(max_abs_diff(attention_map(qa, k, 1e-8f), base) < 1e-5);
    }
}

TEST_CASE("attention on a two-token single-channel instance") {
    // Logits q_i k_j = [[3,-1],[6,-2]]; mean 1.5; variance (2.25+6.25+20.25+12.25)/4.
    const TensorD q({1, 1, 2}, {1, 2}), k({1, 1, 2}, {3, -1}), v({1, 1, 2}, {5, 7});
    const double scale = 1.0 / std::sqrt(10.25 + 1e-8);
    const double logits[2][2] = {{3, -1}, {6, -2}};
    const TensorD out = variance_scaled_attention(constant(q), constant(k), constant(v), 1e-8).value();
    for (int i = 0; i < 2; ++i) {
        const double e0 = std::exp(logits[i][0] * scale), e1 = std::exp(logits[i][1] * scale);
        CHECK(out[i] == doctest::Approx((5 * e0 + 7 * e1) / (e0 + e1)).epsilon(1e-14));
    }
}

TEST_CASE("subec") {
    const PbanConfig c = small_config();
    auto w = init_weights<double>(c, 7);
    const std::string p = "block0.hr.subec";
    Rng rng(7);
    {
        ParamSet<double> params(w, false);
        ForwardContext<double> ctx{params, c, Mode::eval};
        CHECK(subec_forward(ctx, p, constant(random_tensor({2, 16, 8, 8}, rng))).value().shape() == Shape{2, 16, 8, 8});

        // Spatially constant input: away from the zero-padded border the
        // output is constant per channel.
        TensorD flat({1, 16, 8, 8});
        for (Index ch = 0; ch < 16; ++ch)
            for (Index i = 0; i < 64; ++i) flat[ch * 64 + i] = 0.1 * double(ch + 1);
        const TensorD y = subec_forward(ctx, p, constant(flat)).value();
        for (Index ch = 0; ch < 16; ++ch)
            for (Index yy = 2; yy < 6; ++yy)
                for (Index xx = 2; xx < 6; ++xx) CHECK(y.at({0, ch, yy, xx}) == y.at({0, ch, 2, 2}));
    }
    // Zero weights: the channel weight is the compress bias, the pixel weight
    // is the mean of the expand bias after shuffling and 2x2 pooling.
    for (auto& [name, t] : w)
        if (starts_with(name, p) && name.find(".weight") != std::string::npos) t.vec().setZero();
    const TensorD& bc = w.at(p + ".channel_compress.bias");
    const double px = w.at(p + ".pixel_expand.bias").vec().mean();
    ParamSet<double> params(w, false);
    ForwardContext<double> ctx{params, c, Mode::eval};
    const TensorD x = random_tensor({1, 16, 8, 8}, rng);
    const TensorD y = subec_forward(ctx, p, constant(x)).value();
    for (Index ch = 0; ch < 16; ++ch)
        for (Index i = 0; i < 64; ++i) CHECK(y[ch * 64 + i] == doctest::Approx(x[ch * 64 + i] * bc[ch] * px).epsilon(1e-12));
    zero_matching(w, p);
    ParamSet<double> zeroed(w, false);
    ForwardContext<double> zctx{zeroed, c, Mode::eval};
    CHECK(subec_forward(zctx, p, constant(x)).value().vec().isZero());
}

TEST_CASE("zero-weight PBA blocks are the identity") {
    const PbanConfig c = small_config(2);
    auto w = init_weights<double>(c, 8);
    zero_matching(w, "block");
    Rng rng(8);
    const TensorD a = random_tensor({2, 16, 8, 8}, rng), b = random_tensor({2, 16, 8, 8}, rng);
    ParamSet<double> params(w, false);
    ForwardContext<double> ctx{params, c, Mode::eval};
    for (Index blk = 0; blk < 2; ++blk) {
        auto [hr, sr] = pba_block_forward(ctx, blk, constant(a), constant(b), c.attention);
        CHECK(hr.value() == a);
        CHECK(sr.value() == b);
    }
}

TEST_CASE("block stack preserves shapes and tied symmetry") {
    const PbanConfig c = small_config(4);
    auto w = init_weights<double>(c, 9);
    Rng rng(9);
    const TensorD a = random_tensor({1, 16, 8, 8}, rng), b = random_tensor({1, 16, 8, 8}, rng);
    {
        ParamSet<double> params(w, false);
        ForwardContext<double> ctx{params, c, Mode::eval};
        VarD hr = constant(a), sr = constant(b);
        for (Index blk = 0; blk < 4; ++blk) std::tie(hr, sr) = pba_block_forward(ctx, blk, hr, sr, c.attention);
        CHECK(hr.shape() == a.shape());
        CHECK(sr.shape() == b.shape());
    }
    tie_branch_weights(w);
    ParamSet<double> params(w, false);
    ForwardContext<double> ctx{params, c, Mode::eval};
    auto [hr, sr] = pba_block_forward(ctx, 0, constant(a), constant(a), c.attention);
    CHECK(hr.value() == sr.value());
}

TEST_CASE("quality head") {
    const PbanConfig c = small_config();
    auto w = init_weights<double>(c, 10);
    Rng rng(10);
    const TensorD a = random_tensor({3, 16, 8, 8}, rng), b = random_tensor({3, 16, 8, 8}, rng);
    {
        ParamSet<double> params(w, false);
        ForwardContext<double> ctx{params, c, Mode::eval};
        const TensorD first = quality_head_forward(ctx, constant(a), constant(b)).value();
        CHECK(first.shape() == Shape{3, 1});
        CHECK(quality_head_forward(ctx, constant(a), constant(b)).value() == first);
    }
    w.at("head.fusion.fc2.weight").vec().setZero();
    w.at("head.fusion.fc2.bias")[0] = 0.625;
    ParamSet<double> params(w, true);
    Rng drop(1);
    ForwardContext<double> ctx{params, c, Mode::train, &drop};
    CHECK(quality_head_forward(ctx, constant(a), constant(b)).value() == TensorD({3, 1}, {0.625, 0.625, 0.625}));
}

TEST_CASE("pban forward batching and determinism") {
    const PbanConfig c = small_config();
    auto w = init_weights<double>(c, 11);
    Rng rng(11);
    const TensorD hr = patch(rng, 3, 8), sr = patch(rng, 3, 8);
    ParamSet<double> params(w, false);
    ForwardContext<double> ctx{params, c, Mode::eval};
    const TensorD all = pban_forward(ctx, constant(hr), constant(sr)).value();
    CHECK(all.shape() == Shape{3, 1});
    CHECK(pban_forward(ctx, constant(hr), constant(sr)).value() == all);
    for (Index b = 0; b < 3; ++b) {
        const TensorD one = pban_forward(ctx, slice(constant(hr), 0, b, b + 1), slice(constant(sr), 0, b, b + 1)).value();
        CHECK(one[0] == doctest::Approx(all[b]).epsilon(1e-12));
    }
    auto tied = w;
    tie_branch_weights(tied);
    ParamSet<double> tp(tied, false);
    ForwardContext<double> tc{tp, c, Mode::eval};
    const TensorD same = pban_forward(tc, constant(hr), constant(hr)).value();
    CHECK(same.all_finite());
    CHECK(pban_forward(tc, constant(hr), constant(hr)).value() == same);
    CHECK_THROWS_AS(pban_forward(ctx, constant(hr), constant(patch(rng, 2, 8))), DimensionError);
}

TEST_CASE("no-reference variant is one branch with self attention") {
    PbanConfig nr = PbanConfig::micro(Variant::nr);
    nr.patch_size = 8;
    const auto fr_shapes = weight_shapes(small_config());
    for (const auto& [name, shape] : weight_shapes(nr)) {
        CHECK(name.find(".hr.") == std::string::npos);
        if (!starts_with(name, "head.fusion")) {
            REQUIRE(fr_shapes.count(name) == 1);
            CHECK(fr_shapes.at(name) == shape);
        }
    }
    auto w = init_weights<double>(nr, 12);
    ParamSet<double> params(w, false);
    ForwardContext<double> ctx{params, nr, Mode::eval};
    Rng rng(12);
    const TensorD x = patch(rng, 2, 8);
    const TensorD y = pban_nr_forward(ctx, constant(x)).value();
    CHECK(y.shape() == Shape{2, 1});
    CHECK(pban_nr_forward(ctx, constant(x)).value() == y);
    CHECK_THROWS_AS(pban_forward(ctx, constant(x), constant(x)), ParameterError);
}

TEST_CASE("feature dump") {
    PbanConfig c = PbanConfig::micro();
    c.blocks = 2;
    const auto w = init_weights<float>(c, 13);
    const ImageRGB hr = read_image(fixture("pair0_hr.png"));
    const ImageRGB sr = read_image(fixture("pair0_sr.png"));
    const fs::path dir = scratch_dir("features");
    const auto files = dump_features(hr, sr, w, c, dir / "out");
    CHECK(files.size() == 2 * 5 * 2);
    for (const auto& f : files) {
        const ImageRGB img = read_image(f);
        CHECK(img.width == 32);
        const float lo = img.pixels.vec().minCoeff(), hi = img.pixels.vec().maxCoeff();
        CHECK(lo >= 0.0f);
        CHECK(hi <= 1.0f);
        CHECK((hi == 1.0f || hi == 0.0f));
    }
    CHECK(fs::exists(dir / "out" / "block1_sr_4_after_pba_block.png"));
    CHECK(stage_slug("K after GMDC") == "k_after_gmdc");
    CHECK(feature_stage_names()[0] == "image before PBA");
    fs::remove_all(dir);
}

}  // TEST_SUITE
