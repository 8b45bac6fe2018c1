#include "pban/nn.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace pban {

void ConvSpec::validate() const {
    if (in_channels < 1 || out_channels < 1) {
        throw ParameterError("conv: channel counts must be positive");
    }
    if (kernel < 1 || kernel % 2 == 0) {
        throw ParameterError("conv: kernel edge must be odd, got " + std::to_string(kernel));
    }
    if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
        throw ParameterError("conv: groups " + std::to_string(groups) + " must divide " +
                             std::to_string(in_channels) + " and " + std::to_string(out_channels));
    }
}

namespace {

void check_conv_inputs(const char* op, const Shape& x, const Shape& w, const Shape* bias,
                       const ConvSpec& spec) {
    spec.validate();
    if (x.size() != 4 || x[1] != spec.in_channels || x[2] < 1 || x[3] < 1) {
        throw DimensionError(std::string(op) + ": input " + shape_str(x) +
                             " incompatible with in_channels " + std::to_string(spec.in_channels));
    }
    if (w != spec.weight_shape()) {
        throw DimensionError(std::string(op) + ": weight " + shape_str(w) + " expected " +
                             shape_str(spec.weight_shape()));
    }
    if (bias && *bias != spec.bias_shape()) {
        throw DimensionError(std::string(op) + ": bias " + shape_str(*bias) + " expected " +
                             shape_str(spec.bias_shape()));
    }
}

// cols[(c*E + ky)*E + kx, y*W + x] = img[c, y + ky - pad, x + kx - pad] (zero outside).
// [cg,hw] plane block -> channel-last [hw][cg].
template <typename S>
MatrixX<S> channel_last(const S* img, Index cg, Index hw) {
    return ConstMatrixMap<S>(img, cg, hw).transpose();
}

// Kernel columns reordered from (channel, point) to (point, channel):
// wp(o, k*cg + c) = w(o, c*k2 + k).
template <typename S>
MatrixX<S> point_major_weight(const S* w, Index og, Index cg, Index k2) {
    MatrixX<S> wp(og, cg * k2);
    for (Index o = 0; o < og; ++o)
        for (Index c = 0; c < cg; ++c)
            for (Index k = 0; k < k2; ++k) wp(o, k * cg + c) = w[(o * cg + c) * k2 + k];
    return wp;
}

// Adds a point-major gradient back into the (channel, point) weight layout.
template <typename S>
void add_channel_major(const MatrixX<S>& gwp, Index cg, Index k2, S* gw) {
    for (Index o = 0; o < gwp.rows(); ++o)
        for (Index c = 0; c < cg; ++c)
            for (Index k = 0; k < k2; ++k) gw[(o * cg + c) * k2 + k] += gwp(o, k * cg + c);
}

// Columns [hw][k2*cg] of a channel-last image, zero outside the border.
template <typename S>
void im2col(const MatrixX<S>& xcl, Index h, Index w, Index e, MatrixX<S>& cols) {
    const Index pad = (e - 1) / 2, cg = xcl.cols();
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            S* dst = cols.data() + (y * w + x) * e * e * cg;
            for (Index ky = 0; ky < e; ++ky) {
                const Index iy = y + ky - pad;
                for (Index kx = 0; kx < e; ++kx, dst += cg) {
                    const Index ix = x + kx - pad;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                        std::fill_n(dst, cg, S(0));
                    } else {
                        std::copy_n(xcl.data() + (iy * w + ix) * cg, cg, dst);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates columns into a channel-last image.
template <typename S>
void col2im(const MatrixX<S>& cols, Index h, Index w, Index e, MatrixX<S>& xcl) {
    const Index pad = (e - 1) / 2, cg = xcl.cols();
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            const S* src = cols.data() + (y * w + x) * e * e * cg;
            for (Index ky = 0; ky < e; ++ky) {
                const Index iy = y + ky - pad;
                for (Index kx = 0; kx < e; ++kx, src += cg) {
                    const Index ix = x + kx - pad;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                    S* dst = xcl.data() + (iy * w + ix) * cg;
                    for (Index c = 0; c < cg; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

// Bilinear stencil of one fractional position. Taps outside the image point
// at element 0 with zero mask, so evaluation is branch-free.
template <typename S>
struct Stencil {
    std::int32_t idx[4];  // flat y*W+x of (y0,x0), (y0,x1), (y1,x0), (y1,x1)
    S w[4];               // masked interpolation weights
    S m[4];               // 1 for in-range taps
    S ly, lx;             // fractional parts
};

template <typename S>
Stencil<S> make_stencil(S py, S px, Index h, Index w) {
    Stencil<S> st;
    const S fy = std::floor(py);
    const S fx = std::floor(px);
    st.ly = py - fy;
    st.lx = px - fx;
    // Far-away samples: all taps out of range.
    if (fy < S(-2) || fy > S(h) || fx < S(-2) || fx > S(w)) {
        for (int i = 0; i < 4; ++i) {
            st.idx[i] = 0;
            st.w[i] = st.m[i] = S(0);
        }
        return st;
    }
    const Index y0 = Index(fy);
    const Index x0 = Index(fx);
    const Index ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const Index xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const S ws[4] = {(S(1) - st.ly) * (S(1) - st.lx), (S(1) - st.ly) * st.lx,
                     st.ly * (S(1) - st.lx), st.ly * st.lx};
    for (int i = 0; i < 4; ++i) {
        const bool inside = ys[i] >= 0 && ys[i] < h && xs[i] >= 0 && xs[i] < w;
        st.idx[i] = inside ? std::int32_t(ys[i] * w + xs[i]) : 0;
        st.m[i] = inside ? S(1) : S(0);
        st.w[i] = inside ? ws[i] : S(0);
    }
    return st;
}

template <typename S>
S stencil_value(const Stencil<S>& st, const S* plane) {
    return st.w[0] * plane[st.idx[0]] + st.w[1] * plane[st.idx[1]] + st.w[2] * plane[st.idx[2]] +
           st.w[3] * plane[st.idx[3]];
}

// d value / d py and d value / d px.
template <typename S>
std::pair<S, S> stencil_coord_grad(const Stencil<S>& st, const S* plane) {
    const S v00 = st.m[0] * plane[st.idx[0]], v01 = st.m[1] * plane[st.idx[1]];
    const S v10 = st.m[2] * plane[st.idx[2]], v11 = st.m[3] * plane[st.idx[3]];
    const S dy = (S(1) - st.lx) * (v10 - v00) + st.lx * (v11 - v01);
    const S dx = (S(1) - st.ly) * (v01 - v00) + st.ly * (v11 - v10);
    return {dy, dx};
}

template <typename S>
Var<S> permute(const char* op, const Var<S>& x, Shape out_shape, std::vector<Index> perm) {
    Tensor<S> out(std::move(out_shape));
    for (Index o = 0; o < out.size(); ++o) out[o] = x.value()[perm[std::size_t(o)]];
    auto shared = std::make_shared<std::vector<Index>>(std::move(perm));
    return make_node<S>(op, std::move(out), {x}, [x, shared](const Tensor<S>& g) {
        if (auto* gx = grad_sink(x)) {
            for (Index o = 0; o < g.size(); ++o) (*gx)[(*shared)[std::size_t(o)]] += g[o];
        }
    });
}

}  // namespace

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const ConvSpec& spec) {
    check_conv_inputs("conv2d", x.shape(), weight.shape(), bias.defined() ? &bias.shape() : nullptr,
                      spec);
    const Index batch = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
    const Index e = spec.kernel, k2 = e * e, groups = spec.groups;
    const Index cg = spec.in_channels / groups, og = spec.out_channels / groups;
    const Index rows = cg * k2;
    // Same layout as deform_conv2d, so the two agree exactly at zero offsets.
    auto plane = [=](const Tensor<S>& t, Index b, Index g) { return t.data() + (b * spec.in_channels + g * cg) * hw; };
    Tensor<S> out({batch, spec.out_channels, h, w});
    MatrixX<S> cols(hw, rows);
    std::vector<MatrixX<S>> wp(static_cast<std::size_t>(groups));
    for (Index g = 0; g < groups; ++g) wp[std::size_t(g)] = point_major_weight(weight.value().data() + g * og * rows, og, cg, k2);
    for (Index b = 0; b < batch; ++b) {
        for (Index g = 0; g < groups; ++g) {
            im2col(channel_last(plane(x.value(), b, g), cg, hw), h, w, e, cols);
            MatrixMap<S> o(out.data() + (b * spec.out_channels + g * og) * hw, og, hw);
            o.noalias() = wp[std::size_t(g)] * cols.transpose();
            if (bias.defined()) o.colwise() += bias.value().vec().segment(g * og, og);
        }
    }
    return make_node<S>(
        "conv2d", std::move(out), {x, weight, bias}, [=](const Tensor<S>& grad) {
            auto* gx = grad_sink(x);
            auto* gw = grad_sink(weight);
            auto* gb = bias.defined() ? grad_sink(bias) : nullptr;
            MatrixX<S> cols(hw, rows), gwp(og, rows), gxcl(hw, cg);
            for (Index b = 0; b < batch; ++b) {
                for (Index g = 0; g < groups; ++g) {
                    ConstMatrixMap<S> go(grad.data() + (b * spec.out_channels + g * og) * hw, og, hw);
                    if (gb) gb->vec().segment(g * og, og) += go.rowwise().sum();
                    if (gw) {
                        im2col(channel_last(plane(x.value(), b, g), cg, hw), h, w, e, cols);
                        gwp.noalias() = go * cols;
                        add_channel_major(gwp, cg, k2, gw->data() + g * og * rows);
                    }
                    if (gx) {
                        cols.noalias() = go.transpose() * wp[std::size_t(g)];
                        gxcl.setZero();
                        col2im(cols, h, w, e, gxcl);
                        MatrixMap<S>(gx->data() + (b * spec.in_channels + g * cg) * hw, cg, hw) += gxcl.transpose();
                    }
                }
            }
        });
}

template <typename S>
Var<S> bilinear_sample(const Var<S>& x, const Var<S>& py, const Var<S>& px) {
    if (x.value().rank() != 3) {
        throw DimensionError("bilinear_sample: expected [C,H,W], got " + shape_str(x.shape()));
    }
    if (py.value().size() != 1 || px.value().size() != 1) {
        throw DimensionError("bilinear_sample: coordinates must be scalars");
    }
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto st = make_stencil(py.value()[0], px.value()[0], h, w);
    Tensor<S> out({c});
    for (Index ch = 0; ch < c; ++ch) out[ch] = stencil_value(st, x.value().data() + ch * h * w);
    return make_node<S>("bilinear_sample", std::move(out), {x, py, px},
                        [x, py, px, st, c, h, w](const Tensor<S>& g) {
                            auto* gx = grad_sink(x);
                            auto* gy = grad_sink(py);
                            auto* gxx = grad_sink(px);
                            for (Index ch = 0; ch < c; ++ch) {
                                const S* plane = x.value().data() + ch * h * w;
                                if (gx) {
                                    for (int i = 0; i < 4; ++i) (*gx)[ch * h * w + st.idx[i]] += g[ch] * st.w[i];
                                }
                                if (gy || gxx) {
                                    auto [dy, dx] = stencil_coord_grad(st, plane);
                                    if (gy) (*gy)[0] += g[ch] * dy;
                                    if (gxx) (*gxx)[0] += g[ch] * dx;
                                }
                            }
                        });
}

namespace {

// Stencils of one batch item, indexed [pixel][kernel point].
template <typename S>
std::vector<Stencil<S>> deform_stencils(const S* offsets, Index e, Index h, Index w) {
    const Index k2 = e * e, hw = h * w, pad = (e - 1) / 2;
    std::vector<Stencil<S>> st(std::size_t(k2 * hw));
    for (Index k = 0; k < k2; ++k) {
        const Index ky = k / e, kx = k % e;
        const S* dy = offsets + (2 * k) * hw;
        const S* dx = offsets + (2 * k + 1) * hw;
        for (Index y = 0; y < h; ++y) {
            for (Index x = 0; x < w; ++x) {
                const Index p = y * w + x;
                st[std::size_t(p * k2 + k)] = make_stencil(S(y + ky - pad) + dy[p], S(x + kx - pad) + dx[p], h, w);
            }
        }
    }
    return st;
}

// Modulated, deformed columns [hw][k2*cg] from a channel-last image [hw][cg].
template <typename S>
void deform_columns(const MatrixX<S>& xcl, Index k2, const std::vector<Stencil<S>>& st, const S* mod,
                    MatrixX<S>& cols) {
    const Index hw = xcl.rows(), cg = xcl.cols();
    const S* base = xcl.data();
    for (Index p = 0; p < hw; ++p) {
        S* dst = cols.data() + p * k2 * cg;
        for (Index k = 0; k < k2; ++k, dst += cg) {
            const Stencil<S>& s = st[std::size_t(p * k2 + k)];
            const S m = mod[k * hw + p];
            const S w0 = m * s.w[0], w1 = m * s.w[1], w2 = m * s.w[2], w3 = m * s.w[3];
            const S* r0 = base + s.idx[0] * cg;
            const S* r1 = base + s.idx[1] * cg;
            const S* r2 = base + s.idx[2] * cg;
            const S* r3 = base + s.idx[3] * cg;
            for (Index c = 0; c < cg; ++c) dst[c] = w0 * r0[c] + w1 * r1[c] + w2 * r2[c] + w3 * r3[c];
        }
    }
}

}  // namespace

template <typename S>
Var<S> deform_conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias,
                     const ConvSpec& spec, const DeformField<S>& field) {
    check_conv_inputs("deform_conv2d", x.shape(), weight.shape(),
                      bias.defined() ? &bias.shape() : nullptr, spec);
    const Index batch = x.dim(0), h = x.dim(2), w = x.dim(3), hw = h * w;
    const Index e = spec.kernel, k2 = e * e, groups = spec.groups;
    const Index cg = spec.in_channels / groups, og = spec.out_channels / groups;
    const Index rows = cg * k2;
    if (!field.offsets.defined() || field.offsets.shape() != Shape{batch, 2 * k2, h, w}) {
        throw DimensionError("deform_conv2d: offsets must be " +
                             shape_str({batch, 2 * k2, h, w}));
    }
    if (!field.modulation.defined() || field.modulation.shape() != Shape{batch, k2, h, w}) {
        throw DimensionError("deform_conv2d: modulation must be " + shape_str({batch, k2, h, w}));
    }
    const Var<S> offsets = field.offsets;
    const Var<S> modulation = field.modulation;
    auto plane = [=](const Tensor<S>& t, Index b, Index g) { return t.data() + (b * spec.in_channels + g * cg) * hw; };

    Tensor<S> out({batch, spec.out_channels, h, w});
    MatrixX<S> cols(hw, rows);
    std::vector<MatrixX<S>> wp(static_cast<std::size_t>(groups));
    for (Index g = 0; g < groups; ++g) wp[std::size_t(g)] = point_major_weight(weight.value().data() + g * og * rows, og, cg, k2);
    for (Index b = 0; b < batch; ++b) {
        const auto st = deform_stencils(offsets.value().data() + b * 2 * k2 * hw, e, h, w);
        const S* mod = modulation.value().data() + b * k2 * hw;
        for (Index g = 0; g < groups; ++g) {
            deform_columns(channel_last(plane(x.value(), b, g), cg, hw), k2, st, mod, cols);
            MatrixMap<S> o(out.data() + (b * spec.out_channels + g * og) * hw, og, hw);
            o.noalias() = wp[std::size_t(g)] * cols.transpose();
            if (bias.defined()) o.colwise() += bias.value().vec().segment(g * og, og);
        }
    }
    return make_node<S>(
        "deform_conv2d", std::move(out), {x, weight, bias, offsets, modulation},
        [=](const Tensor<S>& grad) {
            auto* gx = grad_sink(x);
            auto* gw = grad_sink(weight);
            auto* gb = bias.defined() ? grad_sink(bias) : nullptr;
            auto* goff = grad_sink(offsets);
            auto* gmod = grad_sink(modulation);
            MatrixX<S> cols(hw, rows), dcols(hw, rows), gwp(og, rows), gxcl(hw, cg);
            for (Index b = 0; b < batch; ++b) {
                const auto st = deform_stencils(offsets.value().data() + b * 2 * k2 * hw, e, h, w);
                const S* mod = modulation.value().data() + b * k2 * hw;
                for (Index g = 0; g < groups; ++g) {
                    const MatrixX<S> xcl = channel_last(plane(x.value(), b, g), cg, hw);
                    ConstMatrixMap<S> go(grad.data() + (b * spec.out_channels + g * og) * hw, og, hw);
                    if (gb) gb->vec().segment(g * og, og) += go.rowwise().sum();
                    if (gw) {
                        deform_columns(xcl, k2, st, mod, cols);
                        gwp.noalias() = go * cols;
                        add_channel_major(gwp, cg, k2, gw->data() + g * og * rows);
                    }
                    if (!gx && !goff && !gmod) continue;
                    dcols.noalias() = go.transpose() * wp[std::size_t(g)];
                    if (gx) gxcl.setZero();
                    S* gdy = goff ? goff->data() + b * 2 * k2 * hw : nullptr;
                    S* gm = gmod ? gmod->data() + b * k2 * hw : nullptr;
                    const S* base = xcl.data();
                    for (Index p = 0; p < hw; ++p) {
                        for (Index k = 0; k < k2; ++k) {
                            const Stencil<S>& s = st[std::size_t(p * k2 + k)];
                            const S* d = dcols.data() + p * rows + k * cg;
                            const S mk = mod[k * hw + p];
                            const S b00 = (S(1) - s.ly) * (S(1) - s.lx), b01 = (S(1) - s.ly) * s.lx;
                            const S b10 = s.ly * (S(1) - s.lx), b11 = s.ly * s.lx;
                            const S* r0 = base + s.idx[0] * cg;
                            const S* r1 = base + s.idx[1] * cg;
                            const S* r2 = base + s.idx[2] * cg;
                            const S* r3 = base + s.idx[3] * cg;
                            S acc_m = 0, acc_y = 0, acc_x = 0;
                            for (Index c = 0; c < cg; ++c) {
                                const S v00 = s.m[0] * r0[c], v01 = s.m[1] * r1[c];
                                const S v10 = s.m[2] * r2[c], v11 = s.m[3] * r3[c];
                                acc_m += d[c] * (b00 * v00 + b01 * v01 + b10 * v10 + b11 * v11);
                                acc_y += d[c] * ((S(1) - s.lx) * (v10 - v00) + s.lx * (v11 - v01));
                                acc_x += d[c] * ((S(1) - s.ly) * (v01 - v00) + s.ly * (v11 - v10));
                            }
                            if (gm) gm[k * hw + p] += acc_m;
                            if (gdy) {
                                gdy[(2 * k) * hw + p] += mk * acc_y;
                                gdy[(2 * k + 1) * hw + p] += mk * acc_x;
                            }
                            if (gx) {
                                S* g0 = gxcl.data() + s.idx[0] * cg;
                                S* g1 = gxcl.data() + s.idx[1] * cg;
                                S* g2 = gxcl.data() + s.idx[2] * cg;
                                S* g3 = gxcl.data() + s.idx[3] * cg;
                                const S w0 = mk * s.w[0], w1 = mk * s.w[1], w2 = mk * s.w[2], w3 = mk * s.w[3];
                                for (Index c = 0; c < cg; ++c) {
                                    g0[c] += w0 * d[c];
                                    g1[c] += w1 * d[c];
                                    g2[c] += w2 * d[c];
                                    g3[c] += w3 * d[c];
                                }
                            }
                        }
                    }
                    if (gx) {
                        MatrixMap<S>(gx->data() + (b * spec.in_channels + g * cg) * hw, cg, hw) += gxcl.transpose();
                    }
                }
            }
        });
}

template <typename S>
Var<S> pixel_shuffle(const Var<S>& x, Index factor) {
    const Shape& s = x.shape();
    if (factor < 1 || s.size() != 4 || s[1] % (factor * factor) != 0) {
        throw DimensionError("pixel_shuffle: channels of " + shape_str(s) +
                             " not divisible by factor^2 = " + std::to_string(factor * factor));
    }
    const Index batch = s[0], c = s[1] / (factor * factor), h = s[2], w = s[3];
    const Index oh = h * factor, ow = w * factor;
    std::vector<Index> perm(std::size_t(batch * c * oh * ow));
    Index o = 0;
    for (Index b = 0; b < batch; ++b)
        for (Index k = 0; k < c; ++k)
            for (Index yy = 0; yy < oh; ++yy)
                for (Index xx = 0; xx < ow; ++xx) {
                    const Index i = yy / factor, dy = yy % factor;
                    const Index j = xx / factor, dx = xx % factor;
                    const Index ic = k * factor * factor + dy * factor + dx;
                    perm[std::size_t(o++)] = ((b * s[1] + ic) * h + i) * w + j;
                }
    return permute("pixel_shuffle", x, {batch, c, oh, ow}, std::move(perm));
}

template <typename S>
Var<S> pixel_unshuffle(const Var<S>& x, Index factor) {
    const Shape& s = x.shape();
    if (factor < 1 || s.size() != 4 || s[2] % factor != 0 || s[3] % factor != 0) {
        throw DimensionError("pixel_unshuffle: spatial extents of " + shape_str(s) +
                             " not divisible by " + std::to_string(factor));
    }
    const Index batch = s[0], c = s[1], oh = s[2] / factor, ow = s[3] / factor;
    const Index oc = c * factor * factor;
    std::vector<Index> perm(std::size_t(batch * oc * oh * ow));
    Index o = 0;
    for (Index b = 0; b < batch; ++b)
        for (Index ic = 0; ic < oc; ++ic)
            for (Index i = 0; i < oh; ++i)
                for (Index j = 0; j < ow; ++j) {
                    const Index k = ic / (factor * factor);
                    const Index dy = (ic % (factor * factor)) / factor, dx = ic % factor;
                    perm[std::size_t(o++)] =
                        ((b * c + k) * s[2] + i * factor + dy) * s[3] + j * factor + dx;
                }
    return permute("pixel_unshuffle", x, {batch, oc, oh, ow}, std::move(perm));
}

template <typename S>
Var<S> channel_shuffle(const Var<S>& x, Index groups) {
    const Shape& s = x.shape();
    if (s.size() != 4 || groups < 1 || s[1] % groups != 0) {
        throw DimensionError("channel_shuffle: " + std::to_string(groups) +
                             " groups do not divide channels of " + shape_str(s));
    }
    const Index batch = s[0], c = s[1], hw = s[2] * s[3], per = c / groups;
    std::vector<Index> perm(std::size_t(x.value().size()));
    for (Index b = 0; b < batch; ++b)
        for (Index oc = 0; oc < c; ++oc) {
            // out channel a*groups + g reads input channel g*per + a.
            const Index a = oc / groups, g = oc % groups;
            const Index ic = g * per + a;
            for (Index p = 0; p < hw; ++p) {
                perm[std::size_t((b * c + oc) * hw + p)] = (b * c + ic) * hw + p;
            }
        }
    return permute("channel_shuffle", x, s, std::move(perm));
}

template <typename S>
Var<S> adaptive_avg_pool(const Var<S>& x, Index out_h, Index out_w) {
    const Shape& s = x.shape();
    if (s.size() != 4 || out_h < 1 || out_w < 1 || out_h > s[2] || out_w > s[3]) {
        throw DimensionError("adaptive_avg_pool: cannot pool " + shape_str(s) + " to " +
                             std::to_string(out_h) + "x" + std::to_string(out_w));
    }
    const Index planes = s[0] * s[1], h = s[2], w = s[3];
    auto start = [](Index i, Index in, Index out) { return (i * in) / out; };
    auto stop = [](Index i, Index in, Index out) { return ((i + 1) * in + out - 1) / out; };
    Tensor<S> out({s[0], s[1], out_h, out_w});
    for (Index pl = 0; pl < planes; ++pl) {
        const S* in = x.value().data() + pl * h * w;
        for (Index i = 0; i < out_h; ++i) {
            const Index y0 = start(i, h, out_h), y1 = stop(i, h, out_h);
            for (Index j = 0; j < out_w; ++j) {
                const Index x0 = start(j, w, out_w), x1 = stop(j, w, out_w);
                S acc = 0;
                for (Index y = y0; y < y1; ++y)
                    for (Index xx = x0; xx < x1; ++xx) acc += in[y * w + xx];
                out[(pl * out_h + i) * out_w + j] = acc / S((y1 - y0) * (x1 - x0));
            }
        }
    }
    return make_node<S>("adaptive_avg_pool", std::move(out), {x},
                        [=](const Tensor<S>& g) {
                            auto* gx = grad_sink(x);
                            if (!gx) return;
                            for (Index pl = 0; pl < planes; ++pl) {
                                S* gin = gx->data() + pl * h * w;
                                for (Index i = 0; i < out_h; ++i) {
                                    const Index y0 = start(i, h, out_h), y1 = stop(i, h, out_h);
                                    for (Index j = 0; j < out_w; ++j) {
                                        const Index x0 = start(j, w, out_w), x1 = stop(j, w, out_w);
                                        const S share = g[(pl * out_h + i) * out_w + j] /
                                                        S((y1 - y0) * (x1 - x0));
                                        for (Index y = y0; y < y1; ++y)
                                            for (Index xx = x0; xx < x1; ++xx) gin[y * w + xx] += share;
                                    }
                                }
                            }
                        });
}

template <typename S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, BatchNormStats<S> stats,
                  Mode mode, const BatchNormOptions& options) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw DimensionError("batch_norm: expected [B,C,H,W], got " + shape_str(s));
    const Index batch = s[0], c = s[1], hw = s[2] * s[3];
    const Index count = batch * hw;
    if (count < 1) throw DimensionError("batch_norm: empty batch");
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        throw DimensionError("batch_norm: affine parameters must be [" + std::to_string(c) + "]");
    }
    if (!stats.running_mean || !stats.running_var || stats.running_mean->shape() != Shape{c} ||
        stats.running_var->shape() != Shape{c}) {
        throw DimensionError("batch_norm: running statistics must be [" + std::to_string(c) + "]");
    }
    const S eps = S(options.eps);
    auto mean = std::make_shared<VectorX<S>>(c);
    auto inv_std = std::make_shared<VectorX<S>>(c);
    if (mode == Mode::train) {
        for (Index ch = 0; ch < c; ++ch) {
            double m = 0.0;
            for (Index b = 0; b < batch; ++b) {
                const S* p = x.value().data() + (b * c + ch) * hw;
                for (Index i = 0; i < hw; ++i) m += double(p[i]);
            }
            m /= double(count);
            double v = 0.0;
            for (Index b = 0; b < batch; ++b) {
                const S* p = x.value().data() + (b * c + ch) * hw;
                for (Index i = 0; i < hw; ++i) v += (double(p[i]) - m) * (double(p[i]) - m);
            }
            v /= double(count);
            (*mean)[ch] = S(m);
            (*inv_std)[ch] = S(1.0 / std::sqrt(v + options.eps));
            const S mom = S(options.momentum);
            (*stats.running_mean)[ch] = (S(1) - mom) * (*stats.running_mean)[ch] + mom * S(m);
            (*stats.running_var)[ch] = (S(1) - mom) * (*stats.running_var)[ch] + mom * S(v);
        }
    } else {
        for (Index ch = 0; ch < c; ++ch) {
            (*mean)[ch] = (*stats.running_mean)[ch];
            (*inv_std)[ch] = S(1) / std::sqrt((*stats.running_var)[ch] + eps);
        }
    }
    Tensor<S> out(s);
    for (Index b = 0; b < batch; ++b)
        for (Index ch = 0; ch < c; ++ch) {
            const Index off = (b * c + ch) * hw;
            const S a = gamma.value()[ch] * (*inv_std)[ch];
            const S shift = beta.value()[ch] - a * (*mean)[ch];
            out.vec().segment(off, hw) = (x.value().vec().segment(off, hw).array() * a + shift).matrix();
        }
    const bool training = mode == Mode::train;
    return make_node<S>(
        "batch_norm", std::move(out), {x, gamma, beta}, [=](const Tensor<S>& g) {
            auto* gx = grad_sink(x);
            auto* gg = grad_sink(gamma);
            auto* gbeta = grad_sink(beta);
            for (Index ch = 0; ch < c; ++ch) {
                const S m = (*mean)[ch], is = (*inv_std)[ch];
                S sum_g = 0, sum_gx = 0;  // sum g, sum g * xhat
                for (Index b = 0; b < batch; ++b) {
                    const Index off = (b * c + ch) * hw;
                    for (Index i = 0; i < hw; ++i) {
                        sum_g += g[off + i];
                        sum_gx += g[off + i] * (x.value()[off + i] - m) * is;
                    }
                }
                if (gg) (*gg)[ch] += sum_gx;
                if (gbeta) (*gbeta)[ch] += sum_g;
                if (!gx) continue;
                const S gam = gamma.value()[ch];
                const S mg = sum_g / S(count), mgx = sum_gx / S(count);
                for (Index b = 0; b < batch; ++b) {
                    const Index off = (b * c + ch) * hw;
                    for (Index i = 0; i < hw; ++i) {
                        if (training) {
                            const S xhat = (x.value()[off + i] - m) * is;
                            (*gx)[off + i] += gam * is * (g[off + i] - mg - xhat * mgx);
                        } else {
                            (*gx)[off + i] += gam * is * g[off + i];
                        }
                    }
                }
            }
        });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
    const Shape& s = x.shape();
    const Shape& ws = weight.shape();
    if (s.size() != 2 || ws.size() != 2 || ws[1] != s[1] || bias.shape() != Shape{ws[0]}) {
        throw DimensionError("linear: input " + shape_str(s) + ", weight " + shape_str(ws) +
                             ", bias " + shape_str(bias.shape()) + " do not match");
    }
    const Index batch = s[0], din = s[1], dout = ws[0];
    Tensor<S> out({batch, dout});
    MatrixMap<S> o(out.data(), batch, dout);
    o.noalias() = ConstMatrixMap<S>(x.value().data(), batch, din) *
                  ConstMatrixMap<S>(weight.value().data(), dout, din).transpose();
    o.rowwise() += bias.value().vec().transpose();
    return make_node<S>("linear", std::move(out), {x, weight, bias}, [=](const Tensor<S>& g) {
        ConstMatrixMap<S> G(g.data(), batch, dout);
        if (auto* gx = grad_sink(x)) {
            MatrixMap<S>(gx->data(), batch, din).noalias() +=
                G * ConstMatrixMap<S>(weight.value().data(), dout, din);
        }
        if (auto* gw = grad_sink(weight)) {
            MatrixMap<S>(gw->data(), dout, din).noalias() +=
                G.transpose() * ConstMatrixMap<S>(x.value().data(), batch, din);
        }
        if (auto* gb = grad_sink(bias)) gb->vec() += G.colwise().sum().transpose();
    });
}

template <typename S>
Var<S> dropout(const Var<S>& x, double p, Rng& rng, Mode mode) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ParameterError("dropout: probability must be in [0,1), got " + std::to_string(p));
    }
    if (mode == Mode::eval || p == 0.0) return x;
    auto mask = std::make_shared<VectorX<S>>(x.value().size());
    const S keep_scale = S(1.0 / (1.0 - p));
    for (Index i = 0; i < mask->size(); ++i) (*mask)[i] = rng.uniform() < p ? S(0) : keep_scale;
    Tensor<S> out(x.shape(), x.value().vec().cwiseProduct(*mask));
    return make_node<S>("dropout", std::move(out), {x}, [x, mask](const Tensor<S>& g) {
        if (auto* gx = grad_sink(x)) gx->vec() += g.vec().cwiseProduct(*mask);
    });
}

namespace {

struct AttentionDims {
    Index batch, channels, tokens;
};

AttentionDims check_attention(const Shape& q, const Shape& k, const Shape* v) {
    if (q.size() != 3 || k != q || (v && *v != q)) {
        throw DimensionError("attention: q " + shape_str(q) + ", k " + shape_str(k) +
                             (v ? ", v " + shape_str(*v) : std::string()) +
                             " must all be [B,C,N]");
    }
    if (q[2] < 1) throw DimensionError("attention: need at least one token");
    return {q[0], q[1], q[2]};
}

// Mean and population variance of the N^2 logits Q^T K, from C x C Gram
// matrices: sum L = (Q1).(K1), sum L^2 = <QQ^T, KK^T>.
template <typename S>
std::pair<double, double> logit_moments(ConstMatrixMap<S> Q, ConstMatrixMap<S> K) {
    const Eigen::MatrixXd qd = Q.template cast<double>(), kd = K.template cast<double>();
    const double nn = double(Q.cols()) * double(K.cols());
    const double mean = qd.rowwise().sum().dot(kd.rowwise().sum()) / nn;
    const Eigen::MatrixXd qq = qd * qd.transpose(), kk = kd * kd.transpose();
    const double square = qq.cwiseProduct(kk).sum() / nn;
    return {mean, std::max(square - mean * mean, 0.0)};
}

// Softmax probabilities of one batch item; returns the logit variance.
template <typename S>
double attention_probs(ConstMatrixMap<S> Q, ConstMatrixMap<S> K, S eps, MatrixMap<S> A) {
    const double variance = logit_moments(Q, K).second;
    const S scale = S(1.0 / std::sqrt(variance + double(eps)));
    A.noalias() = Q.transpose() * K;
    for (Index r = 0; r < A.rows(); ++r) {
        auto row = A.row(r).array();
        const S mx = row.maxCoeff();
        row = ((row - mx) * scale).exp();
        row /= row.sum();
    }
    return variance;
}

}  // namespace

template <typename S>
Tensor<S> attention_map(const Tensor<S>& q, const Tensor<S>& k, S eps) {
    const auto d = check_attention(q.shape(), k.shape(), nullptr);
    Tensor<S> probs({d.batch, d.tokens, d.tokens});
    const Index c = d.channels, n = d.tokens, cn = c * n, nn = n * n;
    for (Index b = 0; b < d.batch; ++b) {
        attention_probs<S>(ConstMatrixMap<S>(q.data() + b * cn, c, n), ConstMatrixMap<S>(k.data() + b * cn, c, n),
                           eps, MatrixMap<S>(probs.data() + b * nn, n, n));
    }
    return probs;
}

template <typename S>
Var<S> variance_scaled_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, S eps) {
    const auto d = check_attention(q.shape(), k.shape(), &v.shape());
    const Index c = d.channels, n = d.tokens, cn = c * n;
    // One N x N block per item keeps allocations below the mmap threshold.
    auto probs = std::make_shared<std::vector<MatrixX<S>>>(std::size_t(d.batch));
    auto variances = std::make_shared<std::vector<double>>(std::size_t(d.batch));
    Tensor<S> out({d.batch, c, n});
    for (Index b = 0; b < d.batch; ++b) {
        MatrixX<S>& A = (*probs)[std::size_t(b)];
        A.resize(n, n);
        (*variances)[std::size_t(b)] =
            attention_probs<S>(ConstMatrixMap<S>(q.value().data() + b * cn, c, n),
                               ConstMatrixMap<S>(k.value().data() + b * cn, c, n), eps, MatrixMap<S>(A.data(), n, n));
        // out = V A^T  ([C,N] x [N,N]^T)
        MatrixMap<S>(out.data() + b * cn, c, n).noalias() =
            ConstMatrixMap<S>(v.value().data() + b * cn, c, n) * A.transpose();
    }
    return make_node<S>(
        "variance_scaled_attention", std::move(out), {q, k, v}, [=](const Tensor<S>& g) {
            auto* gq = grad_sink(q);
            auto* gk = grad_sink(k);
            auto* gv = grad_sink(v);
            MatrixX<S> dz(n, n), t(c, n), u(c, n);
            for (Index b = 0; b < d.batch; ++b) {
                ConstMatrixMap<S> G(g.data() + b * cn, c, n);
                const MatrixX<S>& A = (*probs)[std::size_t(b)];
                ConstMatrixMap<S> Q(q.value().data() + b * cn, c, n);
                ConstMatrixMap<S> K(k.value().data() + b * cn, c, n);
                ConstMatrixMap<S> V(v.value().data() + b * cn, c, n);
                if (gv) MatrixMap<S>(gv->data() + b * cn, c, n).noalias() += G * A;
                if (!gq && !gk) continue;
                // dA = G^T V, then through the row softmax to dZ, Z = s * L.
                dz.noalias() = G.transpose() * V;
                for (Index r = 0; r < n; ++r) {
                    const S dot = dz.row(r).dot(A.row(r));
                    dz.row(r).array() = A.row(r).array() * (dz.row(r).array() - dot);
                }
                // dL = s dZ + coef (L - mean); L itself is never formed:
                // K dL^T = s K dZ^T + coef (KK^T Q - mean (K1) 1^T), and
                // Q dL = s Q dZ + coef (QQ^T K - mean (Q1) 1^T).
                const double mean = logit_moments(Q, K).first;
                const double denom = (*variances)[std::size_t(b)] + double(eps);
                const double s = 1.0 / std::sqrt(denom);
                double dz_dot_l;
                if (gq) {
                    t.noalias() = K * dz.transpose();
                    dz_dot_l = (Q.array() * t.array()).template cast<double>().sum();
                } else {
                    u.noalias() = Q * dz;
                    dz_dot_l = (K.array() * u.array()).template cast<double>().sum();
                }
                const double coef = 2.0 * dz_dot_l * (-0.5 * s / denom) / (double(n) * double(n));
                if (gq) {
                    const MatrixX<S> kk = K * K.transpose();
                    MatrixMap<S> gqb(gq->data() + b * cn, c, n);
                    gqb += S(s) * t + S(coef) * (kk * Q);
                    gqb.colwise() -= (S(coef * mean) * K.rowwise().sum()).eval();
                }
                if (gk) {
                    if (gq) u.noalias() = Q * dz;
                    const MatrixX<S> qq = Q * Q.transpose();
                    MatrixMap<S> gkb(gk->data() + b * cn, c, n);
                    gkb += S(s) * u + S(coef) * (qq * K);
                    gkb.colwise() -= (S(coef * mean) * Q.rowwise().sum()).eval();
                }
            }
        });
}

#define PBAN_INSTANTIATE_NN(S)                                                                 \
    template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, const ConvSpec&);      \
    template Var<S> bilinear_sample(const Var<S>&, const Var<S>&, const Var<S>&);              \
    template Var<S> deform_conv2d(const Var<S>&, const Var<S>&, const Var<S>&, const ConvSpec&, \
                                  const DeformField<S>&);                                      \
    template Var<S> pixel_shuffle(const Var<S>&, Index);                                       \
    template Var<S> pixel_unshuffle(const Var<S>&, Index);                                     \
    template Var<S> channel_shuffle(const Var<S>&, Index);                                     \
    template Var<S> adaptive_avg_pool(const Var<S>&, Index, Index);                            \
    template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormStats<S>, \
                               Mode, const BatchNormOptions&);                                 \
    template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                       \
    template Var<S> dropout(const Var<S>&, double, Rng&, Mode);                                \
    template Var<S> variance_scaled_attention(const Var<S>&, const Var<S>&, const Var<S>&, S); \
    template Tensor<S> attention_map(const Tensor<S>&, const Tensor<S>&, S);

PBAN_INSTANTIATE_NN(float)
PBAN_INSTANTIATE_NN(double)

}  // namespace pban
