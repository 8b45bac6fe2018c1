#include "pban/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "pban/errors.hpp"

namespace pban {

namespace {

void check_pair(std::span<const double> x, std::span<const double> y, std::size_t min_n, const char* what) {
    if (x.size() != y.size()) {
        throw DimensionError(std::string(what) + ": lengths " + std::to_string(x.size()) + " and " +
                             std::to_string(y.size()));
    }
    if (x.size() < min_n) {
        throw UndefinedMetricError(std::string(what) + " needs at least " + std::to_string(min_n) +
                                   " samples, got " + std::to_string(x.size()));
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
            throw NumericError(std::string(what) + ": non-finite value at index " + std::to_string(i));
        }
    }
}

double mean_of(std::span<const double> x) { return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size()); }

double pearson(std::span<const double> x, std::span<const double> y, const char* what) {
    const double mx = mean_of(x), my = mean_of(y);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw UndefinedMetricError(std::string(what) + " undefined: zero variance input");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double sum_squares(const LogisticParams& p, std::span<const double> x, std::span<const double> y) {
    double c = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = p(x[i]) - y[i];
        c += r * r;
    }
    return c;
}

Eigen::Matrix<double, 5, 1> as_vector(const LogisticParams& p) {
    Eigen::Matrix<double, 5, 1> v;
    v << p.b1, p.b2, p.b3, p.b4, p.b5;
    return v;
}

LogisticParams from_vector(const Eigen::Matrix<double, 5, 1>& v) { return {v[0], v[1], v[2], v[3], v[4]}; }

// 1 / (1 + exp(z)) without overflow.
double logistic_tail(double z) {
    if (z >= 0) {
        const double e = std::exp(-z);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(z));
}

std::pair<double, double> range_of(std::span<const double> x) {
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    return {*lo, *hi};
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double srcc(std::span<const double> x, std::span<const double> y) {
    check_pair(x, y, 2, "srcc");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    return pearson(rx, ry, "srcc");
}

double krcc(std::span<const double> x, std::span<const double> y) {
    check_pair(x, y, 2, "krcc");
    const std::size_t n = x.size();
    double concordant = 0, discordant = 0, tied_x = 0, tied_y = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j], dy = y[i] - y[j];
            if (dx == 0) tied_x += 1;
            if (dy == 0) tied_y += 1;
            if (dx == 0 || dy == 0) continue;
            ((dx > 0) == (dy > 0) ? concordant : discordant) += 1;
        }
    }
    const double pairs = double(n) * double(n - 1) / 2.0;
    const double denom = std::sqrt((pairs - tied_x) * (pairs - tied_y));
    if (denom == 0.0) throw UndefinedMetricError("krcc undefined: all pairs tied");
    return std::clamp((concordant - discordant) / denom, -1.0, 1.0);
}

double plcc(std::span<const double> x, std::span<const double> y) {
    check_pair(x, y, 2, "plcc");
    return pearson(x, y, "plcc");
}

double rmse(std::span<const double> x, std::span<const double> y) {
    check_pair(x, y, 1, "rmse");
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(s / double(x.size()));
}

double LogisticParams::operator()(double x) const {
    return b1 * (0.5 - logistic_tail(b2 * (x - b3))) + b4 * x + b5;
}

LogisticParams default_logistic_start(std::span<const double> pred, std::span<const double> mos) {
    const auto [plo, phi] = range_of(pred);
    const auto [mlo, mhi] = range_of(mos);
    if (phi == plo) throw UndefinedMetricError("logistic fit degenerate: constant predictions");
    return {mhi - mlo, 4.0 / (phi - plo), mean_of(pred), 0.0, mean_of(mos)};
}

LogisticParams affine_logistic_start(std::span<const double> pred, std::span<const double> mos) {
    const double mx = mean_of(pred), my = mean_of(mos);
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        sxy += (pred[i] - mx) * (mos[i] - my);
        sxx += (pred[i] - mx) * (pred[i] - mx);
    }
    if (sxx == 0.0) throw UndefinedMetricError("logistic fit degenerate: constant predictions");
    const double a = sxy / sxx;
    const auto [plo, phi] = range_of(pred);
    return {0.0, 4.0 / (phi - plo), mx, a, my - a * mx};
}

LogisticFit fit_logistic_from(std::span<const double> pred, std::span<const double> mos,
                              const LogisticParams& start, const LmOptions& options) {
    check_pair(pred, mos, 1, "logistic fit");
    const std::size_t n = pred.size();
    LogisticFit fit;
    fit.params = start;
    fit.cost = sum_squares(start, pred, mos);
    double lambda = options.initial_damping;
    Eigen::Matrix<double, Eigen::Dynamic, 5> jac(static_cast<Index>(n), 5);
    Eigen::VectorXd res(static_cast<Index>(n));

    while (fit.iterations < options.max_iterations && !fit.converged) {
        ++fit.iterations;
        const LogisticParams& p = fit.params;
        for (std::size_t i = 0; i < n; ++i) {
            const double s = logistic_tail(p.b2 * (pred[i] - p.b3));
            const double ds = s * (1.0 - s);
            jac(Index(i), 0) = 0.5 - s;
            jac(Index(i), 1) = p.b1 * ds * (pred[i] - p.b3);
            jac(Index(i), 2) = -p.b1 * ds * p.b2;
            jac(Index(i), 3) = pred[i];
            jac(Index(i), 4) = 1.0;
            res[Index(i)] = p(pred[i]) - mos[i];
        }
        const Eigen::Matrix<double, 5, 5> jtj = jac.transpose() * jac;
        const Eigen::Matrix<double, 5, 1> jtr = jac.transpose() * res;
        if (jtr.cwiseAbs().maxCoeff() == 0.0) {
            fit.converged = true;
            break;
        }
        // Retry with growing damping until the cost drops.
        bool accepted = false;
        while (!accepted) {
            Eigen::Matrix<double, 5, 5> a = jtj;
            for (int k = 0; k < 5; ++k) a(k, k) += lambda * std::max(jtj(k, k), 1e-12);
            const Eigen::Matrix<double, 5, 1> step = a.ldlt().solve(-jtr);
            const LogisticParams trial = from_vector(as_vector(p) + step);
            const double cost = step.allFinite() ? sum_squares(trial, pred, mos) : INFINITY;
            if (std::isfinite(cost) && cost < fit.cost) {
                const double rel = (fit.cost - cost) / fit.cost;
                fit.params = trial;
                fit.cost = cost;
                lambda = std::max(lambda / 10.0, 1e-300);
                accepted = true;
                if (rel < options.tolerance || cost == 0.0) fit.converged = true;
            } else {
                lambda *= 10.0;
                // No descent direction left at any damping: a stationary point.
                if (lambda > 1e20) {
                    fit.converged = true;
                    break;
                }
            }
        }
    }
    fit.mapped.resize(n);
    for (std::size_t i = 0; i < n; ++i) fit.mapped[i] = fit.params(pred[i]);
    return fit;
}

LogisticFit logistic_fit_5param(std::span<const double> pred, std::span<const double> mos,
                                const LmOptions& options) {
    check_pair(pred, mos, 5, "logistic fit");
    LogisticFit a = fit_logistic_from(pred, mos, default_logistic_start(pred, mos), options);
    LogisticFit b = fit_logistic_from(pred, mos, affine_logistic_start(pred, mos), options);
    return b.cost < a.cost ? b : a;
}

MetricReport compute_metrics(std::span<const double> pred, std::span<const double> mos) {
    check_pair(pred, mos, 2, "metrics");
    MetricReport r;
    r.n = Index(pred.size());
    r.srcc = srcc(pred, mos);
    r.krcc = krcc(pred, mos);
    std::vector<double> mapped(pred.begin(), pred.end());
    if (pred.size() >= 5) {
        LogisticFit fit = logistic_fit_5param(pred, mos);
        r.logistic = fit.params;
        r.converged = fit.converged;
        mapped = std::move(fit.mapped);
    } else {
        r.logistic = {0.0, 0.0, 0.0, 1.0, 0.0};
    }
    r.plcc = plcc(mapped, mos);
    r.rmse = rmse(mapped, mos);
    return r;
}

void to_json(nlohmann::json& j, const MetricReport& r) {
    j = nlohmann::json{{"srcc", r.srcc},
                       {"krcc", r.krcc},
                       {"plcc", r.plcc},
                       {"rmse", r.rmse},
                       {"n", r.n},
                       {"logistic",
                        {{"b1", r.logistic.b1},
                         {"b2", r.logistic.b2},
                         {"b3", r.logistic.b3},
                         {"b4", r.logistic.b4},
                         {"b5", r.logistic.b5}}},
                       {"converged", r.converged}};
}

}  // namespace pban
