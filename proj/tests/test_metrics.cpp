#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "pban/metrics.hpp"

using namespace pban;
using namespace pban::test;

namespace {

using Vec = std::vector<double>;

double pearson(const Vec& x, const Vec& y) {
    const double n = double(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

// Rank = 1 + #smaller + (#equal - 1) / 2, counted directly.
Vec brute_ranks(const Vec& x) {
    Vec r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double less = 0, equal = 0;
        for (double v : x) {
            less += v < x[i];
            equal += v == x[i];
        }
        r[i] = 1 + less + (equal - 1) / 2;
    }
    return r;
}

double brute_tau_b(const Vec& x, const Vec& y) {
    double nc = 0, nd = 0, tx = 0, ty = 0;
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = (x[i] - x[j]) * (y[i] - y[j]);
            nc += s > 0;
            nd += s < 0;
            tx += x[i] == x[j];
            ty += y[i] == y[j];
        }
    const double n0 = double(n) * double(n - 1) / 2;
    return (nc - nd) / std::sqrt((n0 - tx) * (n0 - ty));
}

Vec random_vec(Rng& rng, std::size_t n, int levels = 0) {
    Vec v(n);
    for (auto& x : v) x = levels ? double(rng.index(std::uint64_t(levels))) : rng.uniform(-5, 5);
    return v;
}

double rmse_of(const Vec& a, const Vec& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / double(a.size()));
}

}  // namespace

TEST_SUITE("eval-metrics") {

TEST_CASE("golden values") {
    CHECK(std::abs(krcc(Vec{1, 2, 3}, Vec{1, 3, 2}) - 1.0 / 3.0) <= 1e-12);
    CHECK(std::abs(rmse(Vec{0, 0}, Vec{3, 4}) - std::sqrt(12.5)) <= 1e-12);
    CHECK(rmse(Vec{1, 2}, Vec{1, 2}) == 0.0);
    CHECK(krcc(Vec{1, 2, 3}, Vec{1, 2, 3}) == 1.0);
}

TEST_CASE("monotone and affine extremes") {
    const Vec x{0.3, -1, 4, 2.5, 7};
    Vec affine(x.size()), neg(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        affine[i] = 2 * x[i] + 1;
        neg[i] = -x[i];
    }
    CHECK(srcc(x, x) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(srcc(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(plcc(x, affine) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(plcc(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));
    Vec shifted = x;
    for (auto& v : shifted) v += 100;
    CHECK(krcc(x, shifted) == 1.0);
}

TEST_CASE("srcc with ties matches the rank-then-pearson oracle") {
    const Vec x{1, 2, 2, 4}, y{1, 3, 2, 4};
    CHECK(average_ranks(x) == Vec{1, 2.5, 2.5, 4});
    CHECK(srcc(x, y) == doctest::Approx(pearson(brute_ranks(x), brute_ranks(y))).epsilon(1e-14));
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.index(40);
        const Vec a = random_vec(rng, n, 5), b = random_vec(rng, n, 7);
        if (std::adjacent_find(a.begin(), a.end(), std::not_equal_to<>()) == a.end()) continue;
        if (std::adjacent_find(b.begin(), b.end(), std::not_equal_to<>()) == b.end()) continue;
        CHECK(average_ranks(a) == brute_ranks(a));
        CHECK(srcc(a, b) == doctest::Approx(pearson(brute_ranks(a), brute_ranks(b))).epsilon(1e-12));
    }
}

TEST_CASE("tau-b agrees with brute-force pair counting") {
    Rng rng(2);
    for (std::size_t n = 2; n <= 50; ++n) {
        for (int levels : {0, 4}) {
            const Vec a = random_vec(rng, n, levels), b = random_vec(rng, n, levels);
            const double expect = brute_tau_b(a, b);
            if (!std::isfinite(expect)) {
                CHECK_THROWS_AS(krcc(a, b), UndefinedMetricError);
                continue;
            }
            const double got = krcc(a, b);
            CHECK(got == doctest::Approx(expect).epsilon(1e-12));
            CHECK(got >= -1.0);
            CHECK(got <= 1.0);
        }
    }
}

TEST_CASE("rank metrics are invariant under strictly increasing maps") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 3 + rng.index(30);
        const Vec a = random_vec(rng, n), b = random_vec(rng, n, trial % 2 ? 6 : 0);
        if (std::adjacent_find(b.begin(), b.end(), std::not_equal_to<>()) == b.end()) continue;
        const double k = 0.1 + rng.uniform(), shift = rng.uniform(-3, 3);
        Vec fa(n), fb(n);
        for (std::size_t i = 0; i < n; ++i) {
            fa[i] = std::exp(k * a[i]) + shift;
            fb[i] = b[i] * b[i] * b[i] + k * b[i];
        }
        CHECK(srcc(fa, b) == doctest::Approx(srcc(a, b)).epsilon(1e-12));
        CHECK(srcc(a, fb) == doctest::Approx(srcc(a, b)).epsilon(1e-12));
        CHECK(krcc(fa, fb) == doctest::Approx(krcc(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("undefined metrics are reported") {
    CHECK_THROWS_AS(srcc(Vec{1, 1, 1}, Vec{1, 2, 3}), UndefinedMetricError);
    CHECK_THROWS_AS(krcc(Vec{2, 2}, Vec{1, 2}), UndefinedMetricError);
    CHECK_THROWS_AS(plcc(Vec{1, 2, 3}, Vec{5, 5, 5}), UndefinedMetricError);
    CHECK_THROWS_AS(srcc(Vec{1}, Vec{1}), UndefinedMetricError);
    CHECK_THROWS_AS(srcc(Vec{1, 2}, Vec{1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(rmse(Vec{}, Vec{}), UndefinedMetricError);
}

TEST_CASE("logistic fit recovers noiseless data") {
    const LogisticParams truth{2.0, 1.5, 0.3, 0.2, 1.0};
    Rng rng(4);
    Vec pred(50), mos(50);
    for (std::size_t i = 0; i < 50; ++i) {
        pred[i] = rng.uniform(-3, 3);
        mos[i] = truth(pred[i]);
    }
    const LogisticFit fit = logistic_fit_5param(pred, mos);
    CHECK(rmse_of(fit.mapped, mos) < 1e-6);
    for (std::size_t i = 0; i < 50; ++i) CHECK(fit.mapped[i] == fit.params(pred[i]));
}

TEST_CASE("logistic fit on exact data keeps zero residual") {
    Vec x(20);
    std::iota(x.begin(), x.end(), 1.0);
    const LogisticFit fit = logistic_fit_5param(x, x);
    CHECK(rmse_of(fit.mapped, x) <= 1e-9);
    CHECK_THROWS_AS(logistic_fit_5param(Vec(20, 1.0), x), UndefinedMetricError);
    CHECK_THROWS_AS(logistic_fit_5param(Vec{1, 2, 3, 4}, Vec{1, 2, 3, 4}), UndefinedMetricError);
}

TEST_CASE("logistic fit is never worse than the affine fit") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 5 + rng.index(60);
        Vec pred = random_vec(rng, n), mos(n);
        for (std::size_t i = 0; i < n; ++i) mos[i] = std::tanh(pred[i]) + 0.3 * rng.uniform(-1, 1);
        // Closed-form least-squares line as the independent baseline.
        const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / double(n);
        const double mm = std::accumulate(mos.begin(), mos.end(), 0.0) / double(n);
        double sxy = 0, sxx = 0;
        for (std::size_t i = 0; i < n; ++i) {
            sxy += (pred[i] - mp) * (mos[i] - mm);
            sxx += (pred[i] - mp) * (pred[i] - mp);
        }
        double affine_cost = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = mm + sxy / sxx * (pred[i] - mp) - mos[i];
            affine_cost += r * r;
        }
        const LogisticFit fit = logistic_fit_5param(pred, mos);
        CHECK(fit.cost <= affine_cost + 1e-9);
        for (double v : {fit.params.b1, fit.params.b2, fit.params.b3, fit.params.b4, fit.params.b5})
            CHECK(std::isfinite(v));
    }
}

TEST_CASE("a monotone fitted curve preserves srcc") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 8 + rng.index(40);
        Vec pred = random_vec(rng, n), mos(n);
        for (std::size_t i = 0; i < n; ++i) mos[i] = 1 / (1 + std::exp(-pred[i])) + 0.05 * rng.uniform(-1, 1);
        const LogisticFit fit = logistic_fit_5param(pred, mos);
        // Check strict monotonicity of q on a dense grid over the pred range.
        const auto [lo, hi] = std::minmax_element(pred.begin(), pred.end());
        int sign = 0;
        bool monotone = true;
        for (int s = 0; s < 2000; ++s) {
            const double a = *lo + (*hi - *lo) * s / 2000.0, b = *lo + (*hi - *lo) * (s + 1) / 2000.0;
            const int d = fit.params(b) > fit.params(a) ? 1 : fit.params(b) < fit.params(a) ? -1 : 0;
            if (d == 0 || (sign != 0 && d != sign)) monotone = false;
            sign = d;
        }
        if (!monotone) continue;
        CHECK(std::abs(srcc(fit.mapped, mos)) == doctest::Approx(std::abs(srcc(pred, mos))).epsilon(1e-12));
    }
}

TEST_CASE("compute_metrics on perfect and inverted predictors") {
    const Vec mos{0.2, 0.9, 0.4, 0.7, 0.1, 0.55, 0.3};
    const MetricReport perfect = compute_metrics(mos, mos);
    CHECK(perfect.srcc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(perfect.krcc == 1.0);
    CHECK(perfect.plcc == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(perfect.rmse <= 1e-9);
    CHECK(perfect.n == 7);

    Vec neg = mos;
    for (auto& v : neg) v = -v;
    const MetricReport inverted = compute_metrics(neg, mos);
    CHECK(inverted.srcc == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(inverted.plcc == doctest::Approx(1.0).epsilon(1e-6));

    const nlohmann::json j = perfect;
    for (const char* key : {"srcc", "krcc", "plcc", "rmse", "n", "logistic", "converged"}) CHECK(j.contains(key));
    for (const char* key : {"b1", "b2", "b3", "b4", "b5"}) CHECK(j["logistic"].contains(key));
}

TEST_CASE("compute_metrics below five samples uses the identity mapping") {
    const MetricReport r = compute_metrics(Vec{1, 2, 4}, Vec{1, 3, 2});
    CHECK_FALSE(r.converged);
    CHECK(r.plcc == doctest::Approx(pearson({1, 2, 4}, {1, 3, 2})).epsilon(1e-14));
    CHECK(r.rmse == doctest::Approx(rmse_of({1, 2, 4}, {1, 3, 2})).epsilon(1e-14));
    CHECK_THROWS_AS(compute_metrics(Vec{1, 1, 1, 1, 1, 1}, Vec{1, 2, 3, 4, 5, 6}), UndefinedMetricError);
}

}  // TEST_SUITE
