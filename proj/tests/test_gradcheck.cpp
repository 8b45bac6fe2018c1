#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "pban/gradcheck.hpp"
#include "pban/nn.hpp"
#include "pban/ops.hpp"

using namespace pban;
using namespace pban::test;

TEST_SUITE("gradcheck") {

TEST_CASE("relative error formula") {
    CHECK(relative_error(1.0, 1.0) == 0.0);
    CHECK(relative_error(2.0, 1.0) == 0.5);
    CHECK(relative_error(-1.0, 1.0) == 2.0);
    // Floor of 1e-8 on the denominator.
    CHECK(relative_error(1e-12, 0.0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(relative_error(0.0, 0.0) == 0.0);
}

TEST_CASE("exact linear layer") {
    const GradCheckReport r = finite_diff_check("linear", std::nullopt, 0);
    CHECK(r.passed());
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("softmax rows on a 3x4 input") {
    const GradCheckReport r = finite_diff_check("softmax_rows", std::vector<Shape>{{3, 4}}, 1);
    CHECK(r.passed());
    CHECK(r.shapes.front() == Shape{3, 4});
    CHECK(r.coordinates == 12);
}

TEST_CASE("deformable convolution with offsets on a 1x4x6x6 input") {
    // Input, weight, bias, offsets [1,2k2,6,6], modulation [1,k2,6,6]; dense and two-group.
    for (Index cg : {4, 2}) {
        const std::vector<Shape> shapes{{1, 4, 6, 6}, {4, cg, 3, 3}, {4}, {1, 18, 6, 6}, {1, 9, 6, 6}};
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const GradCheckReport r = finite_diff_check("deform_conv2d", shapes, seed);
            CHECK_MESSAGE(r.passed(), "seed " << seed << " error " << r.max_rel_error);
            CHECK(r.shapes == shapes);
        }
    }
}

TEST_CASE("the op table covers the required operators") {
    std::set<std::string> names;
    for (const auto& op : checkable_ops()) names.insert(op.name);
    for (const char* required : {"matmul", "softmax_rows", "population_variance", "mse_loss", "conv2d", "deform_conv2d",
                                 "bilinear_sample", "pixel_shuffle", "channel_shuffle", "adaptive_avg_pool",
                                 "batch_norm", "linear", "dropout", "variance_scaled_attention"})
        CHECK_MESSAGE(names.count(required) == 1, required);
    CHECK_THROWS_AS(find_checkable_op("no_such_op"), LookupError);
    CHECK_THROWS_AS(finite_diff_check("no_such_op", std::nullopt, 0), LookupError);
    CHECK_THROWS_AS(run_gradcheck(std::string("no_such_op"), 0, 1), LookupError);
}

TEST_CASE("every op passes twenty seeds") {
    const auto reports = run_gradcheck(std::nullopt, 0, 20);
    CHECK(reports.size() == checkable_ops().size() * 20 + 1);
    for (const auto& r : reports)
        if (r.op != kModelLossCheck) CHECK_MESSAGE(r.passed(), r.op << " seed " << r.seed << " error " << r.max_rel_error);
}

TEST_CASE("end-to-end loss gradient over 50 parameters") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const GradCheckReport r = check_model_gradient(gradcheck_model_config(), seed, 50);
        CHECK_MESSAGE(r.passed(), "seed " << seed << " error " << r.max_rel_error);
        CHECK(r.coordinates == 50);
    }
}

TEST_CASE("a wrong gradient is caught") {
    Rng rng(3);
    const TensorD x = random_tensor({2, 3}, rng);
    const ScalarFn square = [](const std::vector<VarD>& in) { return sum(mul(in[0], in[0])); };
    CHECK(check_gradients("square", square, {x}, 0).passed());

    // Sum whose backward rule is off by a factor of two.
    const ScalarFn broken = [](const std::vector<VarD>& in) {
        const VarD a = in[0];
        return make_node<double>("broken", TensorD({1}, {a.value().vec().sum()}), {a},
                                 [a](const TensorD& g) { accumulate_grad(a, TensorD::constant(a.shape(), 2.0 * g[0])); });
    };
    const GradCheckReport bad = check_gradients("broken", broken, {x}, 0);
    CHECK_FALSE(bad.passed());
    CHECK(bad.failing_coordinate.has_value());
    CHECK(bad.max_rel_error == doctest::Approx(0.5));
}

}  // TEST_SUITE
