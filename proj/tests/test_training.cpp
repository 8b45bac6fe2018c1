#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "helpers.hpp"
#include "pban/loss.hpp"
#include "pban/training.hpp"

using namespace pban;
using namespace pban::test;

namespace {

PbanConfig quiet_micro() {
    PbanConfig c = PbanConfig::micro();
    c.dropout = 0.0;
    return c;
}

ImageRGB random_image(Index w, Index h, Rng& rng) {
    ImageRGB img{w, h, TensorF({3, h, w})};
    for (Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] = float(rng.uniform());
    return img;
}

// Left and right 32x32 halves swapped.
ImageRGB swap_halves(const ImageRGB& img) {
    ImageRGB out = img;
    for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < 32; ++y)
            for (Index x = 0; x < 64; ++x) out.pixels.at({c, y, x}) = img.pixels.at({c, y, (x + 32) % 64});
    return out;
}

double patch_score(const NamedWeights<float>& w, const PbanConfig& c, const TensorF& sr, const TensorF& hr) {
    ParamSet<float> params(w);
    ForwardContext<float> ctx{params, c, Mode::eval};
    const Shape s{1, 3, 32, 32};
    return pban_forward(ctx, constant(hr.reshaped(s)), constant(sr.reshaped(s))).value()[0];
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("mse loss") {
    CHECK(mse_loss(constant(TensorD({3, 1}, {1, 2, 3})), TensorD({3}, {1, 2, 3})).value().item() == 0.0);
    CHECK(mse_loss(constant(TensorD({2, 1}, {1, 2})), TensorD({2}, {0, 0})).value().item() == 2.5);
    auto pred = param(TensorD({3, 1}, {0.5, -1, 2}));
    const TensorD target({3}, {1, 1, 1});
    const TensorD g = backward(mse_loss(pred, target))[pred];
    for (Index b = 0; b < 3; ++b) CHECK(g[b] == doctest::Approx(2.0 * (pred.value()[b] - target[b]) / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(mse_loss(constant(TensorD({2, 1})), TensorD({3})), DimensionError);
}

TEST_CASE("sgd without momentum or decay is plain descent") {
    NamedWeights<double> w{{"a.weight", TensorD({2}, {1, -2})}};
    NamedWeights<double> g{{"a.weight", TensorD({2}, {0.5, 4})}};
    auto v = zero_velocity(w);
    SgdConfig cfg;
    cfg.lr = 0.25;
    cfg.momentum = 0;
    cfg.weight_decay = 0;
    sgd_step(w, g, v, cfg);
    CHECK(w.at("a.weight") == TensorD({2}, {1 - 0.125, -2 - 1.0}));
}

TEST_CASE("sgd two-step momentum unroll") {
    // Multiples of 1/16 keep every intermediate exactly representable.
    Rng rng(1);
    TensorD p0({5}), g0({5});
    for (Index i = 0; i < 5; ++i) {
        p0[i] = (double(rng.index(64)) - 32) / 16;
        g0[i] = (double(rng.index(64)) - 32) / 16;
    }
    NamedWeights<double> w{{"x.weight", p0}, {"x.bn.running_mean", p0}};
    NamedWeights<double> g{{"x.weight", g0}};
    auto v = zero_velocity(w);
    CHECK(v.size() == 1);
    SgdConfig cfg;
    cfg.lr = 0.125;
    cfg.momentum = 0.5;
    cfg.weight_decay = 0;
    sgd_step(w, g, v, cfg);
    sgd_step(w, g, v, cfg);
    // v1 = g, v2 = (1 + m) g; total update -lr g (2 + m).
    for (Index i = 0; i < 5; ++i) CHECK(w.at("x.weight")[i] == p0[i] - 0.125 * g0[i] * 2.5);
    CHECK(w.at("x.bn.running_mean") == p0);
}

TEST_CASE("sgd weight decay with zero gradient") {
    NamedWeights<double> w{{"w", TensorD({2}, {1, -3})}};
    NamedWeights<double> g{{"w", TensorD({2})}};
    auto v = zero_velocity(w);
    SgdConfig cfg;
    cfg.lr = 0.5;
    cfg.momentum = 0;
    cfg.weight_decay = 0.25;
    for (int step = 1; step <= 3; ++step) {
        sgd_step(w, g, v, cfg);
        CHECK(w.at("w")[0] == doctest::Approx(std::pow(1 - 0.125, step)).epsilon(1e-15));
        CHECK(w.at("w")[1] == doctest::Approx(-3 * std::pow(1 - 0.125, step)).epsilon(1e-15));
    }
}

TEST_CASE("sgd rejects missing gradients") {
    NamedWeights<double> w{{"w", TensorD({2})}};
    NamedWeights<double> none;
    auto v = zero_velocity(w);
    CHECK_THROWS_AS(sgd_step(w, none, v, SgdConfig{}), ContractError);
    NamedWeights<double> wrong{{"w", TensorD({3})}};
    CHECK_THROWS_AS(sgd_step(w, wrong, v, SgdConfig{}), ContractError);
}

TEST_CASE("kfold split") {
    const FoldSplit even = kfold_split(10, 5, 3);
    for (Index f = 0; f < 5; ++f) CHECK(even.members(f).size() == 2);
    const FoldSplit odd = kfold_split(7, 5, 3);
    std::vector<std::size_t> sizes;
    for (Index f = 0; f < 5; ++f) sizes.push_back(odd.members(f).size());
    CHECK(sizes == std::vector<std::size_t>{2, 2, 1, 1, 1});
    CHECK(kfold_split(10, 5, 3).assignments == even.assignments);
    CHECK(kfold_split(10, 5, 4).assignments != even.assignments);
    CHECK_THROWS_AS(kfold_split(4, 5, 0), ParameterError);
    CHECK_THROWS_AS(kfold_split(4, 1, 0), ParameterError);
}

TEST_CASE("kfold folds partition the records") {
    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        const Index k = 2 + Index(rng.index(6)), n = k + Index(rng.index(40));
        const FoldSplit s = kfold_split(n, k, rng.next());
        std::vector<int> seen(std::size_t(n), 0);
        for (Index f = 0; f < k; ++f) {
            const auto val = s.members(f), rest = s.complement(f);
            CHECK(Index(val.size() + rest.size()) == n);
            for (Index r : val) ++seen[std::size_t(r)];
        }
        CHECK(std::all_of(seen.begin(), seen.end(), [](int x) { return x == 1; }));
    }
}

TEST_CASE("patch dataset labels every patch with its record's mos") {
    const Manifest m = load_manifest(fixture("manifest.csv"));
    const PatchDataset d = build_patch_dataset(m, 32);
    REQUIRE(d.size() == 8);
    for (Index i = 0; i < 8; ++i) {
        CHECK(d.record[std::size_t(i)] == i);
        CHECK(d.mos[std::size_t(i)] == float(m.records[std::size_t(i)].mos));
    }
    CHECK(d.patches_of({2, 5}) == std::vector<Index>{2, 5});
    CHECK(stack_patches(d.hr, {1, 3}).shape() == Shape{2, 3, 32, 32});
}

TEST_CASE("data errors name the record") {
    const fs::path dir = scratch_dir("mismatch");
    Rng rng(2);
    auto png = [&](const fs::path& p, Index w, Index h) {
        std::vector<std::uint8_t> px(std::size_t(w * h));
        for (auto& v : px) v = std::uint8_t(rng.index(256));
        const auto bytes = encode_png_gray(w, h, px);
        write_file(p, bytes);
    };
    png(dir / "a_sr.png", 32, 32);
    png(dir / "a_hr.png", 32, 32);
    png(dir / "b_sr.png", 64, 32);
    png(dir / "b_hr.png", 32, 32);
    png(dir / "c_sr.png", 16, 16);
    png(dir / "c_hr.png", 16, 16);
    Manifest m;
    m.records = {{dir / "a_sr.png", dir / "a_hr.png", 0.5}, {dir / "b_sr.png", dir / "b_hr.png", 0.5}};
    try {
        build_patch_dataset(m, 32);
        FAIL("expected a data error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("b_sr.png") != std::string::npos);
    }
    m.records = {{dir / "c_sr.png", dir / "c_hr.png", 0.5}};
    CHECK_THROWS_AS(build_patch_dataset(m, 32), DataError);
    const ImageRGB small = read_image(dir / "c_sr.png");
    CHECK_THROWS_AS(predict_image(init_weights<float>(quiet_micro(), 0), quiet_micro(), small, small), DataError);
    fs::remove_all(dir);
}

TEST_CASE("predict_image averages patch scores") {
    const PbanConfig c = quiet_micro();
    const auto w = init_weights<float>(c, 3);
    Rng rng(3);
    const ImageRGB sr = random_image(64, 32, rng), hr = random_image(64, 32, rng);
    const auto sp = extract_patches(sr), hp = extract_patches(hr);
    const double a = patch_score(w, c, sp[0], hp[0]), b = patch_score(w, c, sp[1], hp[1]);
    CHECK(predict_image(w, c, sr, hr) == doctest::Approx((a + b) / 2).epsilon(1e-6));
    const ImageRGB one_sr = random_image(32, 32, rng), one_hr = random_image(32, 32, rng);
    CHECK(predict_image(w, c, one_sr, one_hr) == doctest::Approx(patch_score(w, c, one_sr.pixels, one_hr.pixels)).epsilon(1e-6));
    CHECK(std::abs(predict_image(w, c, swap_halves(sr), swap_halves(hr)) - predict_image(w, c, sr, hr)) < 1e-6);
    CHECK_THROWS_AS(predict_image(w, c, sr, one_hr), DataError);
}

TEST_CASE("small steps decrease the loss") {
    // Fixed data (all 8 patches in one batch), no dropout, lr 0.001.
    const PbanConfig c = quiet_micro();
    const PatchDataset d = build_patch_dataset(load_manifest(fixture("manifest.csv")), 32);
    std::vector<Index> ids(8);
    std::iota(ids.begin(), ids.end(), 0);
    auto w = init_weights<float>(c, 0);
    auto v = zero_velocity(w);
    SgdConfig sgd;
    sgd.lr = 0.001;
    Rng rng(0);
    const auto losses = run_epochs(w, v, d, ids, c, sgd, 11, rng);
    REQUIRE(losses.size() == 11);
    int decreasing = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) decreasing += losses[i] <= losses[i - 1];
    CHECK(decreasing >= 8);
}

TEST_CASE("training is deterministic") {
    const Manifest m = load_manifest(fixture("manifest.csv"));
    const PbanConfig c = PbanConfig::micro();
    SgdConfig sgd;
    sgd.epochs = 2;
    sgd.batch_size = 4;
    sgd.seed = 5;
    const fs::path dir = scratch_dir("determinism");
    const TrainReport r1 = train(m, c, sgd, 2, dir / "a.ckpt");
    const TrainReport r2 = train(m, c, sgd, 2, dir / "b.ckpt");
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    REQUIRE(r1.folds.size() == 2);
    for (std::size_t f = 0; f < 2; ++f) CHECK(r1.folds[f].epoch_loss == r2.folds[f].epoch_loss);
    CHECK(r1.final_epoch_loss == r2.final_epoch_loss);
    CHECK(r1.final_epoch_loss.size() == 2);
    CHECK(r1.records == 8);
    CHECK(r1.patches == 8);

    nlohmann::json j = r1;
    CHECK(j.contains("folds"));
    CHECK(j["final_policy"] == "retrain on full training set after cross-validation");
    const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
    CHECK(ck.config == c);
    CHECK(evaluate(ck.weights, ck.config, m).n == 8);
    CHECK(nlohmann::json(evaluate(ck.weights, ck.config, m)) == nlohmann::json(evaluate(load_checkpoint(dir / "b.ckpt").weights, c, m)));

    sgd.seed = 6;
    train(m, c, sgd, 2, dir / "c.ckpt");
    CHECK(slurp(dir / "a.ckpt") != slurp(dir / "c.ckpt"));
    fs::remove_all(dir);
}

TEST_CASE("train rejects bad arguments") {
    const Manifest m = load_manifest(fixture("manifest.csv"));
    SgdConfig sgd;
    sgd.epochs = 1;
    CHECK_THROWS_AS(train(Manifest{}, PbanConfig::micro(), sgd, 2, "/tmp/never.ckpt"), DataError);
    CHECK_THROWS_AS(train(m, PbanConfig::micro(), sgd, 9, "/tmp/never.ckpt"), ParameterError);
    sgd.batch_size = 0;
    CHECK_THROWS_AS(train(m, PbanConfig::micro(), sgd, 2, "/tmp/never.ckpt"), ParameterError);
}

}  // TEST_SUITE
