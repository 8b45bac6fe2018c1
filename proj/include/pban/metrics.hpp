#pragma once

#include <span>
#include <vector>

#include "json.hpp"
#include "pban/tensor.hpp"

namespace pban {

/// Pearson correlation of average ranks. UndefinedMetricError when either
/// ranking is constant or n < 2.
double srcc(std::span<const double> x, std::span<const double> y);

/// Kendall tau-b with tie corrections, by O(n^2) pair counting.
double krcc(std::span<const double> x, std::span<const double> y);

double plcc(std::span<const double> x, std::span<const double> y);
double rmse(std::span<const double> x, std::span<const double> y);

/// Fractional ranks starting at 1; ties share their average rank.
std::vector<double> average_ranks(std::span<const double> x);

/// q(x) = b1 * (1/2 - 1/(1 + exp(b2 * (x - b3)))) + b4 * x + b5
struct LogisticParams {
    double b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0;
    double operator()(double x) const;
};

struct LogisticFit {
    LogisticParams params;
    std::vector<double> mapped;
    double cost = 0.0;  // sum of squared residuals
    int iterations = 0;
    bool converged = false;
};

struct LmOptions {
    double initial_damping = 1e-3;
    int max_iterations = 500;
    double tolerance = 1e-10;  // relative cost change
};

/// Levenberg-Marquardt least squares from `start`.
LogisticFit fit_logistic_from(std::span<const double> pred, std::span<const double> mos,
                              const LogisticParams& start, const LmOptions& options = {});

/// Starting point b1 = range(mos), b2 = 4/range(pred), b3 = mean(pred), b4 = 0, b5 = mean(mos).
LogisticParams default_logistic_start(std::span<const double> pred, std::span<const double> mos);

/// Least-squares line a*x + b as logistic parameters (b1 = 0).
LogisticParams affine_logistic_start(std::span<const double> pred, std::span<const double> mos);

/// Fits from the default start and from the affine least-squares start and
/// keeps the lower cost. Needs n >= 5; UndefinedMetricError for constant pred.
LogisticFit logistic_fit_5param(std::span<const double> pred, std::span<const double> mos,
                                const LmOptions& options = {});

struct MetricReport {
    double srcc = 0, krcc = 0, plcc = 0, rmse = 0;
    Index n = 0;
    LogisticParams logistic;
    bool converged = false;
};

/// SRCC/KRCC on raw predictions, PLCC/RMSE after the logistic mapping. With
/// fewer than 5 samples the mapping is the identity and converged is false.
MetricReport compute_metrics(std::span<const double> pred, std::span<const double> mos);

void to_json(nlohmann::json& j, const MetricReport& r);

}  // namespace pban
