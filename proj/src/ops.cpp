#include "pban/ops.hpp"

#include <algorithm>
#include <cmath>

namespace pban {

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
    if (a != b) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
    }
}

// Splits a shape into (outer, extent, inner) around `axis`.
struct AxisView {
    Index outer = 1;
    Index extent = 1;
    Index inner = 1;
};

AxisView axis_view(const Shape& shape, Index axis) {
    AxisView v;
    for (Index i = 0; i < axis; ++i) v.outer *= shape[std::size_t(i)];
    v.extent = shape[std::size_t(axis)];
    for (Index i = axis + 1; i < Index(shape.size()); ++i) v.inner *= shape[std::size_t(i)];
    return v;
}

Index normalize_axis(Index axis, Index rank, const char* op) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw DimensionError(std::string(op) + ": axis out of range for rank " +
                             std::to_string(rank));
    }
    return axis;
}

}  // namespace

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                             shape_str(sb));
    }
    const Index m = sa[0], k = sa[1], n = sb[1];
    Tensor<S> out({m, n});
    ConstMatrixMap<S> A(a.value().data(), m, k);
    ConstMatrixMap<S> B(b.value().data(), k, n);
    MatrixMap<S>(out.data(), m, n).noalias() = A * B;
    return make_node<S>("matmul", std::move(out), {a, b}, [a, b, m, k, n](const Tensor<S>& g) {
        ConstMatrixMap<S> G(g.data(), m, n);
        if (auto* ga = grad_sink(a)) {
            MatrixMap<S>(ga->data(), m, k).noalias() +=
                G * ConstMatrixMap<S>(b.value().data(), k, n).transpose();
        }
        if (auto* gb = grad_sink(b)) {
            MatrixMap<S>(gb->data(), k, n).noalias() +=
                ConstMatrixMap<S>(a.value().data(), m, k).transpose() * G;
        }
    });
}

template <typename S>
Var<S> bmm(const Var<S>& a, const Var<S>& b, bool transpose_a, bool transpose_b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) {
        throw DimensionError("bmm: incompatible shapes " + shape_str(sa) + " and " +
                             shape_str(sb));
    }
    const Index batch = sa[0];
    const Index ar = sa[1], ac = sa[2], br = sb[1], bc = sb[2];
    const Index m = transpose_a ? ac : ar;
    const Index k = transpose_a ? ar : ac;
    const Index kb = transpose_b ? bc : br;
    const Index n = transpose_b ? br : bc;
    if (k != kb) {
        throw DimensionError("bmm: inner extents differ for shapes " + shape_str(sa) + " and " +
                             shape_str(sb));
    }
    Tensor<S> out({batch, m, n});
    for (Index i = 0; i < batch; ++i) {
        ConstMatrixMap<S> A(a.value().data() + i * ar * ac, ar, ac);
        ConstMatrixMap<S> B(b.value().data() + i * br * bc, br, bc);
        MatrixMap<S> C(out.data() + i * m * n, m, n);
        if (transpose_a && transpose_b) C.noalias() = A.transpose() * B.transpose();
        else if (transpose_a) C.noalias() = A.transpose() * B;
        else if (transpose_b) C.noalias() = A * B.transpose();
        else C.noalias() = A * B;
    }
    return make_node<S>(
        "bmm", std::move(out), {a, b},
        [=](const Tensor<S>& g) {
            auto* ga = grad_sink(a);
            auto* gb = grad_sink(b);
            for (Index i = 0; i < batch; ++i) {
                ConstMatrixMap<S> G(g.data() + i * m * n, m, n);
                ConstMatrixMap<S> A(a.value().data() + i * ar * ac, ar, ac);
                ConstMatrixMap<S> B(b.value().data() + i * br * bc, br, bc);
                if (ga) {
                    MatrixMap<S> dA(ga->data() + i * ar * ac, ar, ac);
                    // d op(A) = G op(B)^T
                    if (transpose_a) {
                        if (transpose_b) dA.noalias() += B.transpose() * G.transpose();
                        else dA.noalias() += B * G.transpose();
                    } else {
                        if (transpose_b) dA.noalias() += G * B;
                        else dA.noalias() += G * B.transpose();
                    }
                }
                if (gb) {
                    MatrixMap<S> dB(gb->data() + i * br * bc, br, bc);
                    // d op(B) = op(A)^T G
                    if (transpose_b) {
                        if (transpose_a) dB.noalias() += G.transpose() * A.transpose();
                        else dB.noalias() += G.transpose() * A;
                    } else {
                        if (transpose_a) dB.noalias() += A * G;
                        else dB.noalias() += A.transpose() * G;
                    }
                }
            }
        });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same_shape("add", a.shape(), b.shape());
    Tensor<S> out(a.shape(), a.value().vec() + b.value().vec());
    return make_node<S>("add", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
        accumulate_grad(a, g);
        accumulate_grad(b, g);
    });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    require_same_shape("sub", a.shape(), b.shape());
    Tensor<S> out(a.shape(), a.value().vec() - b.value().vec());
    return make_node<S>("sub", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
        accumulate_grad(a, g);
        if (auto* gb = grad_sink(b)) gb->vec() -= g.vec();
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) {
        Tensor<S> out(sa, a.value().vec().cwiseProduct(b.value().vec()));
        return make_node<S>("mul", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
            if (auto* ga = grad_sink(a)) ga->vec() += g.vec().cwiseProduct(b.value().vec());
            if (auto* gb = grad_sink(b)) gb->vec() += g.vec().cwiseProduct(a.value().vec());
        });
    }
    if (sa.size() != sb.size()) {
        throw DimensionError("mul: rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
    const std::size_t rank = sa.size();
    // Strides of b in a's index space; broadcast axes get stride 0.
    std::vector<Index> bstride(rank, 0);
    Index s = 1;
    for (std::size_t i = rank; i-- > 0;) {
        if (sb[i] == sa[i]) bstride[i] = s;
        else if (sb[i] != 1) {
            throw DimensionError("mul: cannot broadcast " + shape_str(sb) + " to " +
                                 shape_str(sa));
        }
        s *= sb[i];
    }
    auto b_index = std::make_shared<std::vector<Index>>(std::size_t(a.value().size()));
    {
        std::vector<Index> idx(rank, 0);
        Index boff = 0;
        for (Index flat = 0; flat < a.value().size(); ++flat) {
            (*b_index)[std::size_t(flat)] = boff;
            for (std::size_t d = rank; d-- > 0;) {
                ++idx[d];
                boff += bstride[d];
                if (idx[d] < sa[d]) break;
                boff -= bstride[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
    Tensor<S> out(sa);
    const S* av = a.value().data();
    const S* bv = b.value().data();
    for (Index i = 0; i < out.size(); ++i) out[i] = av[i] * bv[(*b_index)[std::size_t(i)]];
    return make_node<S>("mul", std::move(out), {a, b}, [a, b, b_index](const Tensor<S>& g) {
        const auto& bi = *b_index;
        if (auto* ga = grad_sink(a)) {
            const S* bv = b.value().data();
            for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[bi[std::size_t(i)]];
        }
        if (auto* gb = grad_sink(b)) {
            const S* av = a.value().data();
            for (Index i = 0; i < g.size(); ++i) (*gb)[bi[std::size_t(i)]] += g[i] * av[i];
        }
    });
}

template <typename S>
Var<S> scale(const Var<S>& x, S factor) {
    Tensor<S> out(x.shape(), x.value().vec() * factor);
    return make_node<S>("scale", std::move(out), {x}, [x, factor](const Tensor<S>& g) {
        if (auto* gx = grad_sink(x)) gx->vec() += g.vec() * factor;
    });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
    Tensor<S> out = Tensor<S>::scalar(x.value().vec().sum());
    return make_node<S>("sum", std::move(out), {x}, [x](const Tensor<S>& g) {
        if (auto* gx = grad_sink(x)) gx->vec().array() += g[0];
    });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
    const Index n = x.value().size();
    if (n == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), S(1) / S(n));
}

template <typename S>
Var<S> relu(const Var<S>& x) {
    Tensor<S> out(x.shape(), x.value().vec().cwiseMax(S(0)));
    return make_node<S>("relu", std::move(out), {x}, [x](const Tensor<S>& g) {
        if (auto* gx = grad_sink(x)) {
            gx->vec().array() += (x.value().vec().array() > S(0)).select(g.vec().array(), S(0));
        }
    });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
    Tensor<S> out(x.shape());
    for (Index i = 0; i < out.size(); ++i) {
        const S v = x.value()[i];
        // Branch on sign so exp never overflows.
        if (v >= 0) {
            out[i] = S(1) / (S(1) + std::exp(-v));
        } else {
            const S e = std::exp(v);
            out[i] = e / (S(1) + e);
        }
    }
    auto y = std::make_shared<Tensor<S>>(out);
    return make_node<S>("sigmoid", std::move(out), {x}, [x, y](const Tensor<S>& g) {
        if (auto* gx = grad_sink(x)) {
            gx->vec().array() +=
                g.vec().array() * y->vec().array() * (S(1) - y->vec().array());
        }
    });
}

template <typename S>
Var<S> softmax_rows(const Var<S>& x) {
    if (x.value().rank() < 1 || x.dim(-1) < 1) {
        throw DimensionError("softmax_rows: last axis must be non-empty, got " +
                             shape_str(x.shape()));
    }
    const Index n = x.dim(-1);
    const Index rows = x.value().size() / n;
    Tensor<S> out(x.shape());
    ConstMatrixMap<S> X(x.value().data(), rows, n);
    MatrixMap<S> Y(out.data(), rows, n);
    for (Index r = 0; r < rows; ++r) {
        const S mx = X.row(r).maxCoeff();
        Y.row(r) = (X.row(r).array() - mx).exp().matrix();
        Y.row(r) /= Y.row(r).sum();
    }
    auto y = std::make_shared<Tensor<S>>(out);
    return make_node<S>("softmax_rows", std::move(out), {x}, [x, y, rows, n](const Tensor<S>& g) {
        auto* gx = grad_sink(x);
        if (!gx) return;
        ConstMatrixMap<S> Y(y->data(), rows, n);
        ConstMatrixMap<S> G(g.data(), rows, n);
        MatrixMap<S> GX(gx->data(), rows, n);
        for (Index r = 0; r < rows; ++r) {
            const S dot = Y.row(r).dot(G.row(r));
            GX.row(r).array() += Y.row(r).array() * (G.row(r).array() - dot);
        }
    });
}

namespace {

// Mean and population variance with double accumulation.
template <typename S>
std::pair<double, double> mean_variance(const S* data, Index n) {
    double m = 0.0;
    for (Index i = 0; i < n; ++i) m += double(data[i]);
    m /= double(n);
    double v = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double d = double(data[i]) - m;
        v += d * d;
    }
    return {m, v / double(n)};
}

}  // namespace

template <typename S>
Var<S> population_variance(const Var<S>& x) {
    const Index n = x.value().size();
    if (n < 1) throw DimensionError("population_variance of empty tensor");
    auto [m, v] = mean_variance(x.value().data(), n);
    const S mean_value = S(m);
    return make_node<S>("population_variance", Tensor<S>::scalar(S(v)), {x},
                        [x, mean_value, n](const Tensor<S>& g) {
                            if (auto* gx = grad_sink(x)) {
                                gx->vec().array() += (x.value().vec().array() - mean_value) *
                                                     (S(2) * g[0] / S(n));
                            }
                        });
}

template <typename S>
Var<S> item_variance(const Var<S>& x) {
    if (x.value().rank() < 1 || x.dim(0) < 1) {
        throw DimensionError("item_variance: need a leading batch axis, got " +
                             shape_str(x.shape()));
    }
    const Index batch = x.dim(0);
    const Index n = x.value().size() / batch;
    if (n < 1) throw DimensionError("item_variance of empty items");
    Tensor<S> out({batch});
    auto means = std::make_shared<std::vector<S>>(std::size_t(batch));
    for (Index b = 0; b < batch; ++b) {
        auto [m, v] = mean_variance(x.value().data() + b * n, n);
        out[b] = S(v);
        (*means)[std::size_t(b)] = S(m);
    }
    return make_node<S>("item_variance", std::move(out), {x},
                        [x, means, batch, n](const Tensor<S>& g) {
                            auto* gx = grad_sink(x);
                            if (!gx) return;
                            for (Index b = 0; b < batch; ++b) {
                                const S c = S(2) * g[b] / S(n);
                                const S m = (*means)[std::size_t(b)];
                                gx->vec().segment(b * n, n).array() +=
                                    (x.value().vec().segment(b * n, n).array() - m) * c;
                            }
                        });
}

template <typename S>
Var<S> divide_by_sqrt(const Var<S>& x, const Var<S>& d, S eps) {
    if (x.value().rank() < 1 || d.shape() != Shape{x.dim(0)}) {
        throw DimensionError("divide_by_sqrt: divisor shape " + shape_str(d.shape()) +
                             " does not match batch of " + shape_str(x.shape()));
    }
    const Index batch = x.dim(0);
    const Index n = x.value().size() / std::max<Index>(batch, 1);
    Tensor<S> out(x.shape());
    for (Index b = 0; b < batch; ++b) {
        const S s = S(1) / std::sqrt(d.value()[b] + eps);
        out.vec().segment(b * n, n) = x.value().vec().segment(b * n, n) * s;
    }
    return make_node<S>("divide_by_sqrt", std::move(out), {x, d},
                        [x, d, eps, batch, n](const Tensor<S>& g) {
                            auto* gx = grad_sink(x);
                            auto* gd = grad_sink(d);
                            for (Index b = 0; b < batch; ++b) {
                                const S denom = d.value()[b] + eps;
                                const S s = S(1) / std::sqrt(denom);
                                if (gx) gx->vec().segment(b * n, n) += g.vec().segment(b * n, n) * s;
                                if (gd) {
                                    const S dot = g.vec().segment(b * n, n).dot(
                                        x.value().vec().segment(b * n, n));
                                    (*gd)[b] += dot * (S(-0.5) * s / denom);
                                }
                            }
                        });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
    Tensor<S> out = x.value().reshaped(std::move(shape));
    return make_node<S>("reshape", std::move(out), {x}, [x](const Tensor<S>& g) {
        if (auto* gx = grad_sink(x)) gx->vec() += g.vec();
    });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, Index axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& first = parts.front().shape();
    axis = normalize_axis(axis, Index(first.size()), "concat");
    Shape out_shape = first;
    out_shape[std::size_t(axis)] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) {
            if (Index(i) != axis && s[i] != first[i]) ok = false;
        }
        if (!ok) {
            throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " +
                                 shape_str(s));
        }
        out_shape[std::size_t(axis)] += s[std::size_t(axis)];
    }
    Tensor<S> out(out_shape);
    const AxisView ov = axis_view(out_shape, axis);
    Index offset = 0;
    std::vector<Index> offsets;
    for (const auto& p : parts) {
        const Index ext = p.dim(axis);
        offsets.push_back(offset);
        for (Index o = 0; o < ov.outer; ++o) {
            std::copy_n(p.value().data() + o * ext * ov.inner, ext * ov.inner,
                        out.data() + (o * ov.extent + offset) * ov.inner);
        }
        offset += ext;
    }
    return make_node<S>("concat", std::move(out), parts, [parts, offsets, ov, axis](const Tensor<S>& g) {
        for (std::size_t i = 0; i < parts.size(); ++i) {
            auto* gp = grad_sink(parts[i]);
            if (!gp) continue;
            const Index ext = parts[i].dim(axis);
            for (Index o = 0; o < ov.outer; ++o) {
                gp->vec().segment(o * ext * ov.inner, ext * ov.inner) +=
                    g.vec().segment((o * ov.extent + offsets[i]) * ov.inner, ext * ov.inner);
            }
        }
    });
}

template <typename S>
Var<S> slice(const Var<S>& x, Index axis, Index begin, Index end) {
    axis = normalize_axis(axis, x.value().rank(), "slice");
    const Index ext = x.dim(axis);
    if (begin < 0 || end > ext || begin > end) {
        throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside extent " + std::to_string(ext));
    }
    Shape out_shape = x.shape();
    out_shape[std::size_t(axis)] = end - begin;
    Tensor<S> out(out_shape);
    const AxisView iv = axis_view(x.shape(), axis);
    const Index len = (end - begin) * iv.inner;
    for (Index o = 0; o < iv.outer; ++o) {
        std::copy_n(x.value().data() + (o * ext + begin) * iv.inner, len, out.data() + o * len);
    }
    return make_node<S>("slice", std::move(out), {x}, [x, iv, begin, len, ext](const Tensor<S>& g) {
        auto* gx = grad_sink(x);
        if (!gx) return;
        for (Index o = 0; o < iv.outer; ++o) {
            gx->vec().segment((o * ext + begin) * iv.inner, len) += g.vec().segment(o * len, len);
        }
    });
}

#define PBAN_INSTANTIATE_OPS(S)                                                \
    template Var<S> matmul(const Var<S>&, const Var<S>&);                      \
    template Var<S> bmm(const Var<S>&, const Var<S>&, bool, bool);             \
    template Var<S> add(const Var<S>&, const Var<S>&);                         \
    template Var<S> sub(const Var<S>&, const Var<S>&);                         \
    template Var<S> mul(const Var<S>&, const Var<S>&);                         \
    template Var<S> scale(const Var<S>&, S);                                   \
    template Var<S> sum(const Var<S>&);                                        \
    template Var<S> mean(const Var<S>&);                                       \
    template Var<S> relu(const Var<S>&);                                       \
    template Var<S> sigmoid(const Var<S>&);                                    \
    template Var<S> softmax_rows(const Var<S>&);                               \
    template Var<S> population_variance(const Var<S>&);                        \
    template Var<S> item_variance(const Var<S>&);                              \
    template Var<S> divide_by_sqrt(const Var<S>&, const Var<S>&, S);           \
    template Var<S> reshape(const Var<S>&, Shape);                             \
    template Var<S> concat(const std::vector<Var<S>>&, Index);                 \
    template Var<S> slice(const Var<S>&, Index, Index, Index);

PBAN_INSTANTIATE_OPS(float)
PBAN_INSTANTIATE_OPS(double)

}  // namespace pban
