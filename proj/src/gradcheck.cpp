#include "pban/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pban/loss.hpp"
#include "pban/nn.hpp"
#include "pban/ops.hpp"

namespace pban {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

namespace {

Index extent(Rng& rng, Index lo = 1, Index hi = 5) { return lo + Index(rng.index(std::uint64_t(hi - lo + 1))); }

TensorD uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Uniform values whose magnitude is at least `margin`, so kinks at 0 are avoided.
TensorD away_from_zero(const Shape& shape, Rng& rng, double margin = 0.05) {
    TensorD t(shape);
    for (Index i = 0; i < t.size(); ++i) {
        const double m = rng.uniform(margin, 1.0);
        t[i] = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

// Integer part in [-2, 1], fractional part in [0.1, 0.9].
TensorD off_lattice(const Shape& shape, Rng& rng) {
    TensorD t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = double(Index(rng.index(4)) - 2) + rng.uniform(0.1, 0.9);
    return t;
}

// Fixed projection sum(out * R); R depends only on the output shape.
VarD project(const VarD& out) {
    Rng rng(0x5eedULL + std::uint64_t(out.value().size()) * 7919ULL);
    TensorD r(out.shape());
    for (Index i = 0; i < r.size(); ++i) r[i] = rng.uniform(-1.0, 1.0);
    return sum(mul(out, VarD::constant(std::move(r))));
}

std::vector<TensorD> uniform_inputs(const std::vector<Shape>& shapes, Rng& rng) {
    std::vector<TensorD> out;
    for (const auto& s : shapes) out.push_back(uniform(s, rng));
    return out;
}

ConvSpec conv_spec_from(const Shape& x, const Shape& w) {
    const Index groups = x[1] / w[1];
    return ConvSpec{x[1], w[0], w[2], groups};
}

std::vector<CheckableOp> build_table() {
    std::vector<CheckableOp> ops;

    ops.push_back({"matmul",
                   [](Rng& r) {
                       const Index m = extent(r), k = extent(r), n = extent(r);
                       return std::vector<Shape>{{m, k}, {k, n}};
                   },
                   uniform_inputs, [](const std::vector<VarD>& in) { return project(matmul(in[0], in[1])); }});

    ops.push_back({"bmm",
                   [](Rng& r) {
                       const Index b = extent(r, 1, 3), m = extent(r), k = extent(r), n = extent(r);
                       return std::vector<Shape>{{b, m, k}, {b, k, n}};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       // All four transpose combinations.
                       return add(add(project(bmm(in[0], in[1])), project(bmm(in[0], in[0], false, true))),
                                  add(project(bmm(in[1], in[1], true, false)),
                                      project(bmm(in[1], in[0], true, true))));
                   }});

    ops.push_back({"softmax_rows",
                   [](Rng& r) {
                       Shape s;
                       const Index rank = extent(r, 1, 3);
                       for (Index i = 0; i < rank; ++i) s.push_back(extent(r));
                       return std::vector<Shape>{s};
                   },
                   [](const std::vector<Shape>& s, Rng& r) { return std::vector<TensorD>{uniform(s[0], r, -3, 3)}; },
                   [](const std::vector<VarD>& in) { return project(softmax_rows(in[0])); }});

    ops.push_back({"population_variance",
                   [](Rng& r) {
                       Shape s;
                       const Index rank = extent(r, 1, 3);
                       for (Index i = 0; i < rank; ++i) s.push_back(extent(r));
                       return std::vector<Shape>{s};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) { return scale(population_variance(in[0]), 3.0); }});

    ops.push_back({"variance_scaling",
                   [](Rng& r) { return std::vector<Shape>{{extent(r), extent(r, 2, 5), extent(r)}}; },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       return project(divide_by_sqrt(in[0], item_variance(in[0]), 1e-8));
                   }});

    ops.push_back({"mse_loss",
                   [](Rng& r) { return std::vector<Shape>{{extent(r), 1}}; },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       Rng r(17);
                       return mse_loss(in[0], uniform({in[0].dim(0)}, r));
                   }});

    ops.push_back({"elementwise",
                   [](Rng& r) {
                       const Shape s{extent(r), extent(r), extent(r), extent(r)};
                       return std::vector<Shape>{s, s, {s[0], s[1], 1, 1}, {s[0], 1, s[2], s[3]}};
                   },
                   [](const std::vector<Shape>& s, Rng& r) {
                       return std::vector<TensorD>{away_from_zero(s[0], r), away_from_zero(s[1], r),
                                                   uniform(s[2], r), uniform(s[3], r)};
                   },
                   [](const std::vector<VarD>& in) {
                       VarD a = relu(add(in[0], scale(in[1], 0.01)));
                       VarD b = sigmoid(sub(in[1], in[0]));
                       VarD c = mul(mul(a, in[2]), in[3]);
                       VarD d = concat(std::vector<VarD>{c, b}, 1);
                       VarD e = slice(d, 1, 1, d.dim(1));
                       return add(project(reshape(e, {e.value().size()})), mean(mul(b, b)));
                   }});

    ops.push_back({"conv2d",
                   [](Rng& r) {
                       const Index groups = extent(r, 1, 2);
                       const Index cg = extent(r, 1, 2), og = extent(r, 1, 2);
                       const Index e = 2 * Index(r.index(3)) + 1;
                       const Shape x{extent(r, 1, 2), cg * groups, extent(r), extent(r)};
                       return std::vector<Shape>{x, {og * groups, cg, e, e}, {og * groups}};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       return project(conv2d(in[0], in[1], in[2], conv_spec_from(in[0].shape(), in[1].shape())));
                   }});

    ops.push_back({"bilinear_sample",
                   [](Rng& r) { return std::vector<Shape>{{extent(r), extent(r), extent(r)}, {}, {}}; },
                   [](const std::vector<Shape>& s, Rng& r) {
                       const double py = double(Index(r.index(std::uint64_t(s[0][1] + 1))) - 1) + r.uniform(0.1, 0.9);
                       const double px = double(Index(r.index(std::uint64_t(s[0][2] + 1))) - 1) + r.uniform(0.1, 0.9);
                       return std::vector<TensorD>{uniform(s[0], r), TensorD::scalar(py), TensorD::scalar(px)};
                   },
                   [](const std::vector<VarD>& in) { return project(bilinear_sample(in[0], in[1], in[2])); }});

    ops.push_back({"deform_conv2d",
                   [](Rng& r) {
                       const Index groups = extent(r, 1, 2);
                       const Index cg = extent(r, 1, 2), og = extent(r, 1, 2);
                       const Index e = 2 * Index(r.index(2)) + 1;
                       const Index b = extent(r, 1, 2), h = extent(r), w = extent(r);
                       return std::vector<Shape>{{b, cg * groups, h, w},
                                                 {og * groups, cg, e, e},
                                                 {og * groups},
                                                 {b, 2 * e * e, h, w},
                                                 {b, e * e, h, w}};
                   },
                   [](const std::vector<Shape>& s, Rng& r) {
                       return std::vector<TensorD>{uniform(s[0], r), uniform(s[1], r), uniform(s[2], r),
                                                   off_lattice(s[3], r), uniform(s[4], r, 0.0, 1.0)};
                   },
                   [](const std::vector<VarD>& in) {
                       return project(deform_conv2d(in[0], in[1], in[2], conv_spec_from(in[0].shape(), in[1].shape()),
                                                    DeformField<double>{in[3], in[4]}));
                   }});

    ops.push_back({"pixel_shuffle",
                   [](Rng& r) {
                       const Index f = extent(r, 1, 3);
                       return std::vector<Shape>{{extent(r, 1, 2), extent(r, 1, 2) * f * f, extent(r, 1, 3), extent(r, 1, 3)},
                                                 {f}};
                   },
                   [](const std::vector<Shape>& s, Rng& r) {
                       return std::vector<TensorD>{uniform(s[0], r)};
                   },
                   [](const std::vector<VarD>& in) {
                       // Factor recovered from the channel count's largest square divisor <= 3^2.
                       Index f = 1;
                       for (Index c = 3; c >= 1; --c) {
                           if (in[0].dim(1) % (c * c) == 0) { f = c; break; }
                       }
                       VarD up = pixel_shuffle(in[0], f);
                       return add(project(up), project(pixel_unshuffle(mul(up, up), f)));
                   }});

    ops.push_back({"channel_shuffle",
                   [](Rng& r) {
                       const Index g = extent(r, 1, 3);
                       return std::vector<Shape>{{extent(r, 1, 2), g * extent(r, 1, 3), extent(r), extent(r)}};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       Index g = 1;
                       for (Index c = 3; c >= 1; --c) {
                           if (in[0].dim(1) % c == 0) { g = c; break; }
                       }
                       return project(channel_shuffle(in[0], g));
                   }});

    ops.push_back({"adaptive_avg_pool",
                   [](Rng& r) {
                       return std::vector<Shape>{{extent(r, 1, 2), extent(r, 1, 3), extent(r), extent(r)}};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       const Index h = in[0].dim(2), w = in[0].dim(3);
                       return add(project(adaptive_avg_pool(in[0], (h + 1) / 2, std::max<Index>(1, w - 1))),
                                  project(adaptive_avg_pool(in[0], 1, 1)));
                   }});

    ops.push_back({"batch_norm",
                   [](Rng& r) {
                       const Index c = extent(r, 1, 3);
                       Index b = extent(r, 1, 3), h = extent(r), w = extent(r);
                       if (b * h * w < 2) b = 2;
                       return std::vector<Shape>{{b, c, h, w}, {c}, {c}};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       const Index c = in[1].dim(0);
                       TensorD mean_a = TensorD::zeros({c}), var_a = TensorD::ones({c});
                       TensorD mean_b = TensorD::constant({c}, 0.2), var_b = TensorD::constant({c}, 0.7);
                       VarD train = batch_norm(in[0], in[1], in[2], {&mean_a, &var_a}, Mode::train);
                       VarD eval = batch_norm(in[0], in[1], in[2], {&mean_b, &var_b}, Mode::eval);
                       return add(project(train), scale(project(eval), 0.5));
                   }});

    ops.push_back({"linear",
                   [](Rng& r) {
                       const Index b = extent(r), d = extent(r), o = extent(r);
                       return std::vector<Shape>{{b, d}, {o, d}, {o}};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) { return project(linear(in[0], in[1], in[2])); }});

    ops.push_back({"dropout",
                   [](Rng& r) { return std::vector<Shape>{{extent(r), extent(r)}}; },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       Rng mask(99);  // same mask on every evaluation
                       return project(dropout(in[0], 0.5, mask, Mode::train));
                   }});

    ops.push_back({"variance_scaled_attention",
                   [](Rng& r) {
                       const Shape s{extent(r, 1, 2), extent(r), extent(r, 2, 5)};
                       return std::vector<Shape>{s, s, s};
                   },
                   uniform_inputs,
                   [](const std::vector<VarD>& in) {
                       return project(variance_scaled_attention(in[0], in[1], in[2], 1e-8));
                   }});

    return ops;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << std::scientific << v;
    return os.str();
}

std::string describe(std::size_t input, Index offset, const Shape& shape) {
    std::ostringstream os;
    os << "input " << input << " " << shape_str(shape) << " element " << offset;
    return os.str();
}

}  // namespace

const std::vector<CheckableOp>& checkable_ops() {
    static const std::vector<CheckableOp> table = build_table();
    return table;
}

const CheckableOp& find_checkable_op(const std::string& name) {
    for (const auto& op : checkable_ops()) {
        if (op.name == name) return op;
    }
    throw LookupError("unregistered gradcheck op '" + name + "'");
}

GradCheckReport check_gradients(const std::string& name, const ScalarFn& fn,
                                const std::vector<TensorD>& inputs, std::uint64_t seed, double eps,
                                double tol, const std::vector<std::pair<std::size_t, Index>>* coords) {
    GradCheckReport report;
    report.op = name;
    report.seed = seed;
    report.tol = tol;
    for (const auto& t : inputs) report.shapes.push_back(t.shape());

    std::vector<VarD> vars;
    for (const auto& t : inputs) vars.push_back(VarD::parameter(t));
    const auto grads = backward(fn(vars));

    auto evaluate = [&](std::size_t which, Index offset, double value) {
        std::vector<VarD> probe;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            TensorD t = inputs[i];
            if (i == which) t[offset] = value;
            probe.push_back(VarD::constant(std::move(t)));
        }
        return fn(probe).value().item();
    };

    std::vector<std::pair<std::size_t, Index>> all;
    if (!coords) {
        for (std::size_t i = 0; i < inputs.size(); ++i)
            for (Index k = 0; k < inputs[i].size(); ++k) all.emplace_back(i, k);
        coords = &all;
    }
    double worst = -1.0;
    std::string worst_at;
    for (const auto& [i, k] : *coords) {
        const double x = inputs[i][k];
        const double h = eps * std::max(1.0, std::abs(x));
        const double numeric = (evaluate(i, k, x + h) - evaluate(i, k, x - h)) / (2.0 * h);
        const double analytic = grads[vars[i]][k];
        const double err = relative_error(analytic, numeric);
        ++report.coordinates;
        if (err > worst) {
            worst = err;
            worst_at = describe(i, k, inputs[i].shape()) + " analytic " + fmt(analytic) +
                       " numeric " + fmt(numeric);
        }
    }
    report.max_rel_error = std::max(worst, 0.0);
    if (worst > tol) report.failing_coordinate = worst_at;
    return report;
}

GradCheckReport finite_diff_check(const std::string& op_name,
                                  const std::optional<std::vector<Shape>>& input_shapes,
                                  std::uint64_t seed, double eps, double tol) {
    if (op_name == kModelLossCheck) return check_model_gradient(gradcheck_model_config(), seed, 50, eps, tol);
    const CheckableOp& op = find_checkable_op(op_name);
    Rng rng(seed);
    const std::vector<Shape> shapes = input_shapes ? *input_shapes : op.sample_shapes(rng);
    const auto inputs = op.make_inputs(shapes, rng);
    return check_gradients(op.name, op.loss, inputs, seed, eps, tol);
}

PbanConfig gradcheck_model_config() {
    PbanConfig c = PbanConfig::micro();
    c.patch_size = 8;
    return c;
}

constexpr double kModelCheckGain = 3.0;

GradCheckReport check_model_gradient(const PbanConfig& config, std::uint64_t seed, Index samples,
                                     double eps, double tol) {
    config.validate();
    Rng rng(seed);
    auto weights = init_weights<double>(config, seed);
    for (auto& [name, t] : weights) {
        if (name.find(".offset.") == std::string::npos) {
            // At the initial scale some interior gradients are ~1e-9 and drown in
            // difference noise; a larger gain keeps every sampled coordinate measurable.
            if (!is_buffer(name) && name.find(".bn.") == std::string::npos) t.vec() *= kModelCheckGain;
            continue;
        }
        if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
            const Index k = t.size() / 3;
            for (Index i = 0; i < 2 * k; ++i) t[i] = double(Index(rng.index(3)) - 1) + rng.uniform(0.2, 0.8);
            for (Index i = 2 * k; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
        }
    }
    const Index p = config.patch_size;
    const TensorD hr = uniform({1, 3, p, p}, rng, 0.0, 1.0);
    const TensorD sr = uniform({1, 3, p, p}, rng, 0.0, 1.0);
    const TensorD target = uniform({1}, rng, 0.0, 1.0);
    const std::uint64_t dropout_seed = rng.next();

    // Trainable tensors in lexicographic order; inputs of the scalar function.
    std::vector<std::string> names;
    std::vector<TensorD> inputs;
    for (const auto& [name, t] : weights) {
        if (is_buffer(name)) continue;
        names.push_back(name);
        inputs.push_back(t);
    }
    ScalarFn fn = [&](const std::vector<VarD>& vars) {
        NamedWeights<double> w = weights;  // fresh running statistics every call
        ParamSet<double> params(w, false);
        for (std::size_t i = 0; i < names.size(); ++i) params.bind(names[i], vars[i]);
        Rng drop(dropout_seed);
        ForwardContext<double> ctx{params, config, Mode::train, &drop};
        return mse_loss(model_forward(ctx, VarD::constant(hr), VarD::constant(sr)), target);
    };

    Index total = 0;
    for (const auto& t : inputs) total += t.size();
    std::vector<std::pair<std::size_t, Index>> coords;
    for (Index s = 0; s < std::min(samples, total); ++s) {
        Index flat = Index(rng.index(std::uint64_t(total)));
        std::size_t i = 0;
        while (flat >= inputs[i].size()) flat -= inputs[i++].size();
        coords.emplace_back(i, flat);
    }
    GradCheckReport report = check_gradients(kModelLossCheck, fn, inputs, seed, eps, tol, &coords);
    report.shapes = {hr.shape(), sr.shape()};
    return report;
}

std::vector<GradCheckReport> run_gradcheck(const std::optional<std::string>& op, std::uint64_t first_seed,
                                           int seeds) {
    if (seeds < 1) throw ParameterError("seed count must be positive");
    std::vector<std::string> names;
    if (op) {
        if (*op != kModelLossCheck) find_checkable_op(*op);
        names.push_back(*op);
    } else {
        for (const auto& entry : checkable_ops()) names.push_back(entry.name);
        names.push_back(kModelLossCheck);
    }
    std::vector<GradCheckReport> reports;
    for (const auto& name : names) {
        // The end-to-end check is expensive; one seed is enough for a full sweep.
        const int n = (name == kModelLossCheck && !op) ? 1 : seeds;
        for (int k = 0; k < n; ++k) reports.push_back(finite_diff_check(name, std::nullopt, first_seed + std::uint64_t(k)));
    }
    return reports;
}

}  // namespace pban
