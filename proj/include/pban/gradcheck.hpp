#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pban/autodiff.hpp"
#include "pban/model.hpp"
#include "pban/random.hpp"

namespace pban {

struct GradCheckReport {
    std::string op;
    double max_rel_error = 0.0;
    double tol = 1e-4;
    std::optional<std::string> failing_coordinate;  // worst coordinate when the check fails
    std::vector<Shape> shapes;
    std::uint64_t seed = 0;
    Index coordinates = 0;

    bool passed() const { return !failing_coordinate.has_value(); }
};

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
double relative_error(double analytic, double numeric);

/// A scalar-valued function of double tensors, checked coordinate by
/// coordinate against central differences. Must be deterministic.
using ScalarFn = std::function<VarD(const std::vector<VarD>&)>;

/// Entry of the checkable-op table: draws random shapes (extents 1..5) and
/// inputs for an operator and reduces its output to a scalar with a fixed
/// random projection.
struct CheckableOp {
    std::string name;
    std::function<std::vector<Shape>(Rng&)> sample_shapes;
    std::function<std::vector<TensorD>(const std::vector<Shape>&, Rng&)> make_inputs;
    ScalarFn loss;
};

const std::vector<CheckableOp>& checkable_ops();

/// Throws LookupError for unknown names.
const CheckableOp& find_checkable_op(const std::string& name);

/// Checks every coordinate of every input (or just `coords`, given as
/// (input index, flat offset) pairs). Step is eps * max(1, |x|).
GradCheckReport check_gradients(const std::string& name, const ScalarFn& fn,
                                const std::vector<TensorD>& inputs, std::uint64_t seed,
                                double eps = 1e-5, double tol = 1e-4,
                                const std::vector<std::pair<std::size_t, Index>>* coords = nullptr);

/// Central-difference check of a registered op on random inputs. Shapes are
/// drawn from the seed unless given explicitly.
GradCheckReport finite_diff_check(const std::string& op,
                                  const std::optional<std::vector<Shape>>& input_shapes,
                                  std::uint64_t seed, double eps = 1e-5, double tol = 1e-4);

/// Name under which the end-to-end check appears in reports.
inline const std::string kModelLossCheck = "pban_loss";

/// MSE-loss gradient of the whole network w.r.t. `samples` randomly chosen
/// scalar parameters. Conv and linear weights are scaled by 3 from their
/// initial draw. Offset predictors get zero weights and fractional
/// biases so every deformable sample sits away from the bilinear lattice;
/// modulation logits are randomised so the masks are not saturated.
GradCheckReport check_model_gradient(const PbanConfig& config, std::uint64_t seed,
                                     Index samples = 50, double eps = 1e-5, double tol = 1e-4);

/// Micro configuration used by the end-to-end check (8x8 patches).
PbanConfig gradcheck_model_config();

/// Runs the op table (or one entry; kModelLossCheck selects the model check)
/// over `seeds` consecutive seeds starting at `first_seed`.
std::vector<GradCheckReport> run_gradcheck(const std::optional<std::string>& op,
                                           std::uint64_t first_seed, int seeds);

}  // namespace pban
