// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "ultrabm/graph.hpp"
#include "ultrabm/tensor.hpp"

namespace ultrabm::ops {

using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

// f: x -> y, df: (x, y) -> dy/dx
template <class F, class DF>
Var unary(Graph& g, Var x, F f, DF df) {
    const Tensor& xv = g.val(x);
    Tensor y(xv.shape());
    const std::int64_t n = xv.numel();
    const Scalar* xd = xv.data();
    Scalar* yd = y.data();
    for (std::int64_t i = 0; i < n; ++i) yd[i] = f(xd[i]);
    return g.emit(std::move(y), {x}, [x, df](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        const Tensor& xv2 = gg.val(x);
        const Tensor& yv2 = gg.val(self);
        Tensor& gx = gg.grad(x);
        const std::int64_t m = xv2.numel();
        const Scalar* god = go.data();
        const Scalar* xd2 = xv2.data();
        const Scalar* yd2 = yv2.data();
        Scalar* gxd = gx.data();
        for (std::int64_t i = 0; i < m; ++i) gxd[i] += god[i] * df(xd2[i], yd2[i]);
    });
}

inline Var sigmoid(Graph& g, Var x) {
    return unary(
        g, x, [](Scalar v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](Scalar, Scalar y) { return y * (1.0 - y); });
}

inline Var leaky_relu(Graph& g, Var x, Scalar slope = 0.2) {
    return unary(
        g, x, [slope](Scalar v) { return v > 0 ? v : slope * v; },
        [slope](Scalar v, Scalar) { return v > 0 ? 1.0 : slope; });
}

inline Var gelu(Graph& g, Var x) {
    constexpr Scalar inv_sqrt2 = 0.70710678118654752440;
    constexpr Scalar inv_sqrt2pi = 0.39894228040143267794;
    return unary(
        g, x, [=](Scalar v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [=](Scalar v, Scalar) {
            return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
        });
}

inline Var exp(Graph& g, Var x) {
    return unary(
        g, x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

inline Var abs(Graph& g, Var x) {
    return unary(
        g, x, [](Scalar v) { return std::abs(v); },
        [](Scalar v, Scalar) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Var clamp(Graph& g, Var x, Scalar lo, Scalar hi) {
    return unary(
        g, x, [=](Scalar v) { return std::min(std::max(v, lo), hi); },
        [=](Scalar v, Scalar) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// Per-element SmoothL1: 0.5 x^2 for |x| <= 1, |x| - 0.5 otherwise.
inline Var smooth_l1(Graph& g, Var x) {
    return unary(
        g, x,
        [](Scalar v) { return std::abs(v) <= 1.0 ? 0.5 * v * v : std::abs(v) - 0.5; },
        [](Scalar v, Scalar) { return std::min(std::max(v, -1.0), 1.0); });
}

inline Var mul_scalar(Graph& g, Var x, Scalar s) {
    return unary(
        g, x, [s](Scalar v) { return s * v; }, [s](Scalar, Scalar) { return s; });
}

inline Var add_scalar(Graph& g, Var x, Scalar s) {
    return unary(
        g, x, [s](Scalar v) { return v + s; }, [](Scalar, Scalar) { return 1.0; });
}

inline Var neg(Graph& g, Var x) { return mul_scalar(g, x, -1.0); }

// ---------------------------------------------------------------------------
// Broadcasting binary ops
// ---------------------------------------------------------------------------

enum class BinOp { Add, Sub, Mul, Div, Max };

namespace detail {

struct Bcast {
    std::array<std::int64_t, 4> out{1, 1, 1, 1};
    std::array<std::int64_t, 4> sa{0, 0, 0, 0};  // strides into a (0 = broadcast)
    std::array<std::int64_t, 4> sb{0, 0, 0, 0};
};

inline Bcast plan_bcast(const Tensor& a, const Tensor& b, const char* who) {
    if (a.rank() > 4 || b.rank() > 4) throw ShapeError(std::string(who) + ": rank > 4");
    std::array<std::int64_t, 4> da{1, 1, 1, 1}, db{1, 1, 1, 1};
    for (int i = 0; i < a.rank(); ++i) da[static_cast<std::size_t>(4 - a.rank() + i)] = a.dim(i);
    for (int i = 0; i < b.rank(); ++i) db[static_cast<std::size_t>(4 - b.rank() + i)] = b.dim(i);
    Bcast p;
    for (int i = 0; i < 4; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
            throw ShapeError(std::string(who) + ": incompatible shapes " + a.shape_str() + " vs " + b.shape_str());
        p.out[i] = std::max(da[i], db[i]);
    }
    std::int64_t st = 1;
    for (int i = 3; i >= 0; --i) {
        p.sa[i] = (da[i] == 1) ? 0 : st;
        st *= da[i];
    }
    st = 1;
    for (int i = 3; i >= 0; --i) {
        p.sb[i] = (db[i] == 1) ? 0 : st;
        st *= db[i];
    }
    return p;
}

inline std::vector<std::int64_t> bcast_out_shape(const Tensor& a, const Tensor& b, const Bcast& p) {
    const int r = std::max(a.rank(), b.rank());
    std::vector<std::int64_t> s(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) s[static_cast<std::size_t>(i)] = p.out[static_cast<std::size_t>(4 - r + i)];
    return s;
}

}  // namespace detail

inline Var binary(Graph& g, Var a, Var b, BinOp op) {
    const Tensor& av = g.val(a);
    const Tensor& bv = g.val(b);
    const auto p = detail::plan_bcast(av, bv, "binary");
    Tensor out(detail::bcast_out_shape(av, bv, p));
    {
        const Scalar* ad = av.data();
        const Scalar* bd = bv.data();
        Scalar* od = out.data();
        std::int64_t o = 0;
        for (std::int64_t i0 = 0; i0 < p.out[0]; ++i0)
            for (std::int64_t i1 = 0; i1 < p.out[1]; ++i1)
                for (std::int64_t i2 = 0; i2 < p.out[2]; ++i2)
                    for (std::int64_t i3 = 0; i3 < p.out[3]; ++i3, ++o) {
                        const Scalar x = ad[i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2] + i3 * p.sa[3]];
                        const Scalar y = bd[i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2] + i3 * p.sb[3]];
                        switch (op) {
                            case BinOp::Add: od[o] = x + y; break;
                            case BinOp::Sub: od[o] = x - y; break;
                            case BinOp::Mul: od[o] = x * y; break;
                            case BinOp::Div: od[o] = x / y; break;
                            case BinOp::Max: od[o] = std::max(x, y); break;
                        }
                    }
    }
    return g.emit(std::move(out), {a, b}, [a, b, op, p](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        const Tensor& av2 = gg.val(a);
        const Tensor& bv2 = gg.val(b);
        const bool na = gg.requires_grad(a);
        const bool nb = gg.requires_grad(b);
        Scalar* gad = na ? gg.grad(a).data() : nullptr;
        Scalar* gbd = nb ? gg.grad(b).data() : nullptr;
        const Scalar* ad = av2.data();
        const Scalar* bd = bv2.data();
        const Scalar* god = go.data();
        std::int64_t o = 0;
        for (std::int64_t i0 = 0; i0 < p.out[0]; ++i0)
            for (std::int64_t i1 = 0; i1 < p.out[1]; ++i1)
                for (std::int64_t i2 = 0; i2 < p.out[2]; ++i2)
                    for (std::int64_t i3 = 0; i3 < p.out[3]; ++i3, ++o) {
                        const std::int64_t ia = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2] + i3 * p.sa[3];
                        const std::int64_t ib = i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2] + i3 * p.sb[3];
                        const Scalar gr = god[o];
                        switch (op) {
                            case BinOp::Add:
                                if (na) gad[ia] += gr;
                                if (nb) gbd[ib] += gr;
                                break;
                            case BinOp::Sub:
                                if (na) gad[ia] += gr;
                                if (nb) gbd[ib] -= gr;
                                break;
                            case BinOp::Mul:
                                if (na) gad[ia] += gr * bd[ib];
                                if (nb) gbd[ib] += gr * ad[ia];
                                break;
                            case BinOp::Div:
                                if (na) gad[ia] += gr / bd[ib];
                                if (nb) gbd[ib] -= gr * ad[ia] / (bd[ib] * bd[ib]);
                                break;
                            case BinOp::Max:  // ties route to the first operand
                                if (ad[ia] >= bd[ib]) {
                                    if (na) gad[ia] += gr;
                                } else if (nb) {
                                    gbd[ib] += gr;
                                }
                                break;
                        }
                    }
    });
}

inline Var add(Graph& g, Var a, Var b) { return binary(g, a, b, BinOp::Add); }
inline Var sub(Graph& g, Var a, Var b) { return binary(g, a, b, BinOp::Sub); }
inline Var mul(Graph& g, Var a, Var b) { return binary(g, a, b, BinOp::Mul); }
inline Var div(Graph& g, Var a, Var b) { return binary(g, a, b, BinOp::Div); }
inline Var max(Graph& g, Var a, Var b) { return binary(g, a, b, BinOp::Max); }

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

inline Var sum_all(Graph& g, Var x) {
    const Tensor& xv = g.val(x);
    Tensor y = Tensor::scalar(xv.sum());
    return g.emit(std::move(y), {x}, [x](Graph& gg, Var self) {
        const Scalar gr = gg.grad(self)[0];
        Tensor& gx = gg.grad(x);
        Scalar* gxd = gx.data();
        const std::int64_t n = gx.numel();
        for (std::int64_t i = 0; i < n; ++i) gxd[i] += gr;
    });
}

inline Var mean_all(Graph& g, Var x) {
    const std::int64_t n = g.val(x).numel();
    return mul_scalar(g, sum_all(g, x), 1.0 / static_cast<Scalar>(n));
}

// (B,C,H,W) -> (C): mean over batch and spatial dims per channel.
inline Var channel_mean(Graph& g, Var x) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "channel_mean");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const Scalar inv = 1.0 / static_cast<Scalar>(B * H * W);
    Tensor y({C});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            y[c] += pairwise_sum(xv.data() + xv.idx4(b, c, 0, 0), H * W) * inv;
    return g.emit(std::move(y), {x}, [x, B, C, H, W, inv](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                Scalar* pg = gx.data() + gx.idx4(b, c, 0, 0);
                const Scalar gr = go[c] * inv;
                for (std::int64_t i = 0; i < H * W; ++i) pg[i] += gr;
            }
    });
}

inline Var reshape(Graph& g, Var x, std::vector<std::int64_t> shape) {
    Tensor y = g.val(x).reshaped(std::move(shape)).clone();
    return g.emit(std::move(y), {x}, [x](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        const Scalar* god = go.data();
        Scalar* gxd = gx.data();
        const std::int64_t n = gx.numel();
        for (std::int64_t i = 0; i < n; ++i) gxd[i] += god[i];
    });
}

inline Var concat_ch(Graph& g, Var a, Var b) {
    const Tensor& av = g.val(a);
    const Tensor& bv = g.val(b);
    require_rank(av, 4, "concat_ch");
    require_rank(bv, 4, "concat_ch");
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
        throw ShapeError("concat_ch: non-channel dims differ");
    const std::int64_t B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
    Tensor y({B, Ca + Cb, H, W});
    const std::int64_t plane = H * W;
    for (std::int64_t bb = 0; bb < B; ++bb) {
        std::copy_n(av.data() + bb * Ca * plane, Ca * plane, y.data() + bb * (Ca + Cb) * plane);
        std::copy_n(bv.data() + bb * Cb * plane, Cb * plane, y.data() + (bb * (Ca + Cb) + Ca) * plane);
    }
    return g.emit(std::move(y), {a, b}, [a, b, B, Ca, Cb, plane](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        for (std::int64_t bb = 0; bb < B; ++bb) {
            if (gg.requires_grad(a)) {
                Scalar* ga = gg.grad(a).data() + bb * Ca * plane;
                const Scalar* src = go.data() + bb * (Ca + Cb) * plane;
                for (std::int64_t i = 0; i < Ca * plane; ++i) ga[i] += src[i];
            }
            if (gg.requires_grad(b)) {
                Scalar* gb = gg.grad(b).data() + bb * Cb * plane;
                const Scalar* src = go.data() + (bb * (Ca + Cb) + Ca) * plane;
                for (std::int64_t i = 0; i < Cb * plane; ++i) gb[i] += src[i];
            }
        }
    });
}

inline Var slice_ch(Graph& g, Var x, std::int64_t c0, std::int64_t c1) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "slice_ch");
    if (c0 < 0 || c1 > xv.dim(1) || c0 >= c1) throw ShapeError("slice_ch: bad channel range");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t Cs = c1 - c0, plane = H * W;
    Tensor y({B, Cs, H, W});
    for (std::int64_t b = 0; b < B; ++b)
        std::copy_n(xv.data() + (b * C + c0) * plane, Cs * plane, y.data() + b * Cs * plane);
    return g.emit(std::move(y), {x}, [x, B, C, c0, Cs, plane](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t b = 0; b < B; ++b) {
            Scalar* dst = gx.data() + (b * C + c0) * plane;
            const Scalar* src = go.data() + b * Cs * plane;
            for (std::int64_t i = 0; i < Cs * plane; ++i) dst[i] += src[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

struct ConvSpec {
    int stride = 1;
    int pad = 0;  // symmetric zero padding
    int groups = 1;
};

namespace detail {

// col is (Cg*kh*kw) x (Ho*Wo) for one (batch, group).
inline void im2col(const Tensor& x, std::int64_t b, std::int64_t g, std::int64_t Cg, std::int64_t kh,
                   std::int64_t kw, const ConvSpec& spec, std::int64_t Ho, std::int64_t Wo, Scalar* col) {
    const std::int64_t H = x.dim(2), W = x.dim(3);
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < Cg; ++c) {
        const Scalar* plane = x.data() + x.idx4(b, g * Cg + c, 0, 0);
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx, ++r) {
                Scalar* dst = col + r * Ho * Wo;
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const std::int64_t iy = oy * spec.stride - spec.pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill_n(dst + oy * Wo, Wo, Scalar(0));
                        continue;
                    }
                    const Scalar* src = plane + iy * W;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const std::int64_t ix = ox * spec.stride - spec.pad + kx;
                        dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : Scalar(0);
                    }
                }
            }
    }
}

inline void col2im_acc(Scalar* gx_plane0, std::int64_t H, std::int64_t W, std::int64_t Cg, std::int64_t kh,
                       std::int64_t kw, const ConvSpec& spec, std::int64_t Ho, std::int64_t Wo,
                       const Scalar* col) {
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < Cg; ++c) {
        Scalar* plane = gx_plane0 + c * H * W;
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx, ++r) {
                const Scalar* src = col + r * Ho * Wo;
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const std::int64_t iy = oy * spec.stride - spec.pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    Scalar* dst = plane + iy * W;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const std::int64_t ix = ox * spec.stride - spec.pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
                    }
                }
            }
    }
}

}  // namespace detail

// x: (B, Cin, H, W), w: (Cout, Cin/groups, kh, kw), b: (Cout) or invalid Var.
inline Var conv2d(Graph& g, Var x, Var w, Var b, ConvSpec spec = {}) {
    const Tensor& xv = g.val(x);
    const Tensor& wv = g.val(w);
    require_rank(xv, 4, "conv2d");
    require_rank(wv, 4, "conv2d weight");
    const std::int64_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t Cout = wv.dim(0), Cg = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
    const std::int64_t G = spec.groups;
    if (Cin != Cg * G || Cout % G != 0)
        throw ShapeError("conv2d: channel/group mismatch x=" + xv.shape_str() + " w=" + wv.shape_str());
    const std::int64_t Ho = (H + 2 * spec.pad - kh) / spec.stride + 1;
    const std::int64_t Wo = (W + 2 * spec.pad - kw) / spec.stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: output would be empty");
    const std::int64_t Cog = Cout / G, K = Cg * kh * kw;

    Tensor out({B, Cout, Ho, Wo});
    std::vector<Scalar> col(static_cast<std::size_t>(K * Ho * Wo));
    for (std::int64_t bb = 0; bb < B; ++bb)
        for (std::int64_t gg = 0; gg < G; ++gg) {
            detail::im2col(xv, bb, gg, Cg, kh, kw, spec, Ho, Wo, col.data());
            CMapM Wm(wv.data() + gg * Cog * K, Cog, K);
            CMapM Cm(col.data(), K, Ho * Wo);
            MapM Om(out.data() + out.idx4(bb, gg * Cog, 0, 0), Cog, Ho * Wo);
            Om.noalias() = Wm * Cm;
        }
    if (b.valid()) {
        const Tensor& bvec = g.val(b);
        if (bvec.numel() != Cout) throw ShapeError("conv2d: bias size mismatch");
        for (std::int64_t bb = 0; bb < B; ++bb)
            for (std::int64_t c = 0; c < Cout; ++c) {
                Scalar* p = out.data() + out.idx4(bb, c, 0, 0);
                const Scalar bias = bvec[c];
                for (std::int64_t i = 0; i < Ho * Wo; ++i) p[i] += bias;
            }
    }

    std::vector<Var> parents{x, w};
    if (b.valid()) parents.push_back(b);
    return g.emit(std::move(out), std::move(parents),
                  [x, w, b, spec, B, Cin, H, W, Cout, Cg, kh, kw, G, Cog, K, Ho, Wo](Graph& gg, Var self) {
                      const Tensor& go = gg.grad(self);
                      const Tensor& xv2 = gg.val(x);
                      const Tensor& wv2 = gg.val(w);
                      const bool nx = gg.requires_grad(x);
                      const bool nw = gg.requires_grad(w);
                      const bool nb = b.valid() && gg.requires_grad(b);
                      std::vector<Scalar> col(static_cast<std::size_t>(K * Ho * Wo));
                      std::vector<Scalar> dcol(nx ? static_cast<std::size_t>(K * Ho * Wo) : 0);
                      for (std::int64_t bb = 0; bb < B; ++bb)
                          for (std::int64_t grp = 0; grp < G; ++grp) {
                              CMapM Go(go.data() + go.idx4(bb, grp * Cog, 0, 0), Cog, Ho * Wo);
                              if (nw || nx) detail::im2col(xv2, bb, grp, Cg, kh, kw, spec, Ho, Wo, col.data());
                              if (nw) {
                                  MapM Gw(gg.grad(w).data() + grp * Cog * K, Cog, K);
                                  CMapM Cm(col.data(), K, Ho * Wo);
                                  Gw.noalias() += Go * Cm.transpose();
                              }
                              if (nx) {
                                  CMapM Wm(wv2.data() + grp * Cog * K, Cog, K);
                                  MapM Dc(dcol.data(), K, Ho * Wo);
                                  Dc.noalias() = Wm.transpose() * Go;
                                  Tensor& gx = gg.grad(x);
                                  detail::col2im_acc(gx.data() + gx.idx4(bb, grp * Cg, 0, 0), H, W, Cg, kh,
                                                     kw, spec, Ho, Wo, dcol.data());
                              }
                          }
                      if (nb) {
                          Tensor& gb = gg.grad(b);
                          for (std::int64_t bb = 0; bb < B; ++bb)
                              for (std::int64_t c = 0; c < Cout; ++c) {
                                  const Scalar* p = go.data() + go.idx4(bb, c, 0, 0);
                                  Scalar s = 0;
                                  for (std::int64_t i = 0; i < Ho * Wo; ++i) s += p[i];
                                  gb[c] += s;
                              }
                      }
                  });
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

inline Var maxpool2(Graph& g, Var x) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "maxpool2");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 || W % 2) throw ShapeError("maxpool2: spatial dims must be even, got " + xv.shape_str());
    const std::int64_t Ho = H / 2, Wo = W / 2;
    Tensor y({B, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(y.numel()));
    std::int64_t o = 0;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t oy = 0; oy < Ho; ++oy)
                for (std::int64_t ox = 0; ox < Wo; ++ox, ++o) {
                    std::int64_t best = xv.idx4(b, c, 2 * oy, 2 * ox);
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::int64_t i = xv.idx4(b, c, 2 * oy + dy, 2 * ox + dx);
                            if (xv[i] > xv[best]) best = i;
                        }
                    y[o] = xv[best];
                    (*arg)[static_cast<std::size_t>(o)] = best;
                }
    return g.emit(std::move(y), {x}, [x, arg](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        const std::int64_t n = go.numel();
        for (std::int64_t i = 0; i < n; ++i) gx[(*arg)[static_cast<std::size_t>(i)]] += go[i];
    });
}

enum class Interp { Bilinear, Bicubic };

namespace detail {

struct Taps {
    std::vector<std::int32_t> idx;  // n_out * n_taps
    std::vector<Scalar> w;
    int n_taps = 0;
};

inline Scalar keys_kernel(Scalar t) {
    constexpr Scalar a = -0.5;  // Catmull-Rom
    t = std::abs(t);
    if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
    if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
    return 0.0;
}

// Half-pixel-center upsampling taps for integer factor f.
inline Taps make_up_taps(std::int64_t in_n, int f, Interp mode) {
    Taps taps;
    taps.n_taps = (mode == Interp::Bilinear) ? 2 : 4;
    const std::int64_t out_n = in_n * f;
    taps.idx.resize(static_cast<std::size_t>(out_n * taps.n_taps));
    taps.w.resize(static_cast<std::size_t>(out_n * taps.n_taps));
    for (std::int64_t o = 0; o < out_n; ++o) {
        const Scalar s = (static_cast<Scalar>(o) + 0.5) / f - 0.5;
        const std::int64_t i0 = static_cast<std::int64_t>(std::floor(s));
        const Scalar t = s - static_cast<Scalar>(i0);
        auto clampi = [in_n](std::int64_t i) {
            return static_cast<std::int32_t>(std::min(std::max(i, std::int64_t(0)), in_n - 1));
        };
        if (mode == Interp::Bilinear) {
            taps.idx[static_cast<std::size_t>(o * 2 + 0)] = clampi(i0);
            taps.idx[static_cast<std::size_t>(o * 2 + 1)] = clampi(i0 + 1);
            taps.w[static_cast<std::size_t>(o * 2 + 0)] = 1.0 - t;
            taps.w[static_cast<std::size_t>(o * 2 + 1)] = t;
        } else {
            for (int k = 0; k < 4; ++k) {
                taps.idx[static_cast<std::size_t>(o * 4 + k)] = clampi(i0 - 1 + k);
                taps.w[static_cast<std::size_t>(o * 4 + k)] = keys_kernel(t - static_cast<Scalar>(k - 1));
            }
        }
    }
    return taps;
}

}  // namespace detail

// Integer-factor upsampling with half-pixel alignment. Separable linear
// map, so the backward pass is its exact transpose.
inline Var upsample(Graph& g, Var x, int factor, Interp mode) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "upsample");
    if (factor < 1) throw ShapeError("upsample: factor must be >= 1");
    if (factor == 1) return x;
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t Ho = H * factor, Wo = W * factor;
    auto th = std::make_shared<detail::Taps>(detail::make_up_taps(H, factor, mode));
    auto tw = std::make_shared<detail::Taps>(detail::make_up_taps(W, factor, mode));
    const int T = th->n_taps;

    Tensor y({B, C, Ho, Wo});
    std::vector<Scalar> tmp(static_cast<std::size_t>(Ho * W));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const Scalar* src = xv.data() + xv.idx4(b, c, 0, 0);
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                Scalar* row = tmp.data() + oy * W;
                std::fill_n(row, W, Scalar(0));
                for (int k = 0; k < T; ++k) {
                    const Scalar wgt = th->w[static_cast<std::size_t>(oy * T + k)];
                    const Scalar* in_row = src + th->idx[static_cast<std::size_t>(oy * T + k)] * W;
                    for (std::int64_t xcol = 0; xcol < W; ++xcol) row[xcol] += wgt * in_row[xcol];
                }
            }
            Scalar* dst = y.data() + y.idx4(b, c, 0, 0);
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
                const Scalar* row = tmp.data() + oy * W;
                Scalar* out_row = dst + oy * Wo;
                for (std::int64_t ox = 0; ox < Wo; ++ox) {
                    Scalar acc = 0;
                    for (int k = 0; k < T; ++k)
                        acc += tw->w[static_cast<std::size_t>(ox * T + k)] *
                               row[tw->idx[static_cast<std::size_t>(ox * T + k)]];
                    out_row[ox] = acc;
                }
            }
        }
    return g.emit(std::move(y), {x}, [x, th, tw, B, C, H, W, Ho, Wo, T](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        std::vector<Scalar> tmp(static_cast<std::size_t>(Ho * W));
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                std::fill(tmp.begin(), tmp.end(), Scalar(0));
                const Scalar* src = go.data() + go.idx4(b, c, 0, 0);
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const Scalar* out_row = src + oy * Wo;
                    Scalar* row = tmp.data() + oy * W;
                    for (std::int64_t ox = 0; ox < Wo; ++ox) {
                        const Scalar gr = out_row[ox];
                        for (int k = 0; k < T; ++k)
                            row[tw->idx[static_cast<std::size_t>(ox * T + k)]] +=
                                tw->w[static_cast<std::size_t>(ox * T + k)] * gr;
                    }
                }
                Scalar* dst = gx.data() + gx.idx4(b, c, 0, 0);
                for (std::int64_t oy = 0; oy < Ho; ++oy) {
                    const Scalar* row = tmp.data() + oy * W;
                    for (int k = 0; k < T; ++k) {
                        const Scalar wgt = th->w[static_cast<std::size_t>(oy * T + k)];
                        Scalar* in_row = dst + th->idx[static_cast<std::size_t>(oy * T + k)] * W;
                        for (std::int64_t xcol = 0; xcol < W; ++xcol) in_row[xcol] += wgt * row[xcol];
                    }
                }
            }
    });
}

// (B, C*r^2, H, W) -> (B, C, rH, rW), periodic shuffle.
inline Var pixel_shuffle(Graph& g, Var x, int r) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "pixel_shuffle");
    if (r < 1) throw ShapeError("pixel_shuffle: factor must be >= 1");
    if (r == 1) return x;
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t r2 = static_cast<std::int64_t>(r) * r;
    if (C % r2 != 0) throw ShapeError("pixel_shuffle: channels " + std::to_string(C) +
                                      " not divisible by r^2=" + std::to_string(r2));
    const std::int64_t Co = C / r2;
    Tensor y({B, Co, H * r, W * r});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t dy = 0; dy < r; ++dy)
                for (std::int64_t dx = 0; dx < r; ++dx) {
                    const Scalar* src = xv.data() + xv.idx4(b, co * r2 + dy * r + dx, 0, 0);
                    for (std::int64_t h = 0; h < H; ++h)
                        for (std::int64_t w = 0; w < W; ++w)
                            y.at(b, co, h * r + dy, w * r + dx) = src[h * W + w];
                }
    return g.emit(std::move(y), {x}, [x, r, B, Co, H, W, r2](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t co = 0; co < Co; ++co)
                for (std::int64_t dy = 0; dy < r; ++dy)
                    for (std::int64_t dx = 0; dx < r; ++dx) {
                        Scalar* dst = gx.data() + gx.idx4(b, co * r2 + dy * r + dx, 0, 0);
                        for (std::int64_t h = 0; h < H; ++h)
                            for (std::int64_t w = 0; w < W; ++w)
                                dst[h * W + w] += go.at(b, co, h * r + dy, w * r + dx);
                    }
    });
}

// (B, C, rH, rW) -> (B, C*r^2, H, W), exact inverse of pixel_shuffle.
inline Var pixel_unshuffle(Graph& g, Var x, int r) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "pixel_unshuffle");
    if (r < 1) throw ShapeError("pixel_unshuffle: factor must be >= 1");
    if (r == 1) return x;
    const std::int64_t B = xv.dim(0), C = xv.dim(1), Hr = xv.dim(2), Wr = xv.dim(3);
    if (Hr % r || Wr % r) throw ShapeError("pixel_unshuffle: spatial dims not divisible by r");
    const std::int64_t H = Hr / r, W = Wr / r, r2 = static_cast<std::int64_t>(r) * r;
    Tensor y({B, C * r2, H, W});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t dy = 0; dy < r; ++dy)
                for (std::int64_t dx = 0; dx < r; ++dx) {
                    Scalar* dst = y.data() + y.idx4(b, c * r2 + dy * r + dx, 0, 0);
                    for (std::int64_t h = 0; h < H; ++h)
                        for (std::int64_t w = 0; w < W; ++w)
                            dst[h * W + w] = xv.at(b, c, h * r + dy, w * r + dx);
                }
    return g.emit(std::move(y), {x}, [x, r, B, C, H, W, r2](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t dy = 0; dy < r; ++dy)
                    for (std::int64_t dx = 0; dx < r; ++dx) {
                        const Scalar* src = go.data() + go.idx4(b, c * r2 + dy * r + dx, 0, 0);
                        for (std::int64_t h = 0; h < H; ++h)
                            for (std::int64_t w = 0; w < W; ++w)
                                gx.at(b, c, h * r + dy, w * r + dx) += src[h * W + w];
                    }
    });
}

inline Var global_avg_pool(Graph& g, Var x) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "global_avg_pool");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const Scalar inv = 1.0 / static_cast<Scalar>(H * W);
    Tensor y({B, C, 1, 1});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const Scalar* p = xv.data() + xv.idx4(b, c, 0, 0);
            Scalar s = 0;
            for (std::int64_t i = 0; i < H * W; ++i) s += p[i];
            y.at(b, c, 0, 0) = s * inv;
        }
    return g.emit(std::move(y), {x}, [x, B, C, H, W, inv](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                const Scalar gr = go.at(b, c, 0, 0) * inv;
                Scalar* p = gx.data() + gx.idx4(b, c, 0, 0);
                for (std::int64_t i = 0; i < H * W; ++i) p[i] += gr;
            }
    });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, batched matmul
// ---------------------------------------------------------------------------

// LayerNorm across the channel dim at each (b,h,w), with per-channel affine.
inline Var layer_norm_ch(Graph& g, Var x, Var gamma, Var beta, Scalar eps = 1e-6) {
    const Tensor& xv = g.val(x);
    require_rank(xv, 4, "layer_norm_ch");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const Tensor& gv = g.val(gamma);
    const Tensor& bv = g.val(beta);
    if (gv.numel() != C || bv.numel() != C) throw ShapeError("layer_norm_ch: affine size mismatch");
    const std::int64_t P = H * W;
    Tensor y(xv.shape());
    auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(B * P));
    auto mean = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(B * P));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t p = 0; p < P; ++p) {
            Scalar mu = 0;
            for (std::int64_t c = 0; c < C; ++c) mu += xv[xv.idx4(b, c, 0, 0) + p];
            mu /= static_cast<Scalar>(C);
            Scalar var = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const Scalar d = xv[xv.idx4(b, c, 0, 0) + p] - mu;
                var += d * d;
            }
            var /= static_cast<Scalar>(C);
            const Scalar inv = 1.0 / std::sqrt(var + eps);
            (*mean)[static_cast<std::size_t>(b * P + p)] = mu;
            (*inv_std)[static_cast<std::size_t>(b * P + p)] = inv;
            for (std::int64_t c = 0; c < C; ++c)
                y[y.idx4(b, c, 0, 0) + p] = gv[c] * (xv[xv.idx4(b, c, 0, 0) + p] - mu) * inv + bv[c];
        }
    return g.emit(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, mean, inv_std, B, C, P](Graph& gg, Var self) {
                      const Tensor& go = gg.grad(self);
                      const Tensor& xv2 = gg.val(x);
                      const Tensor& gv2 = gg.val(gamma);
                      const bool nx = gg.requires_grad(x);
                      const bool ng = gg.requires_grad(gamma);
                      const bool nb = gg.requires_grad(beta);
                      for (std::int64_t b = 0; b < B; ++b)
                          for (std::int64_t p = 0; p < P; ++p) {
                              const Scalar mu = (*mean)[static_cast<std::size_t>(b * P + p)];
                              const Scalar inv = (*inv_std)[static_cast<std::size_t>(b * P + p)];
                              Scalar s1 = 0, s2 = 0;
                              for (std::int64_t c = 0; c < C; ++c) {
                                  const std::int64_t i = xv2.idx4(b, c, 0, 0) + p;
                                  const Scalar xh = (xv2[i] - mu) * inv;
                                  const Scalar gy = go[i];
                                  if (ng) gg.grad(gamma)[c] += gy * xh;
                                  if (nb) gg.grad(beta)[c] += gy;
                                  s1 += gv2[c] * gy;
                                  s2 += gv2[c] * gy * xh;
                              }
                              if (nx) {
                                  s1 /= static_cast<Scalar>(C);
                                  s2 /= static_cast<Scalar>(C);
                                  Tensor& gx = gg.grad(x);
                                  for (std::int64_t c = 0; c < C; ++c) {
                                      const std::int64_t i = xv2.idx4(b, c, 0, 0) + p;
                                      const Scalar xh = (xv2[i] - mu) * inv;
                                      gx[i] += (gv2[c] * go[i] - s1 - xh * s2) * inv;
                                  }
                              }
                          }
                  });
}

// Softmax over the last dimension.
inline Var softmax_last(Graph& g, Var x) {
    const Tensor& xv = g.val(x);
    const int r = xv.rank();
    if (r < 1) throw ShapeError("softmax_last: rank 0 input");
    const std::int64_t N = xv.dim(r - 1);
    const std::int64_t rows = xv.numel() / N;
    Tensor y(xv.shape());
    for (std::int64_t row = 0; row < rows; ++row) {
        const Scalar* src = xv.data() + row * N;
        Scalar* dst = y.data() + row * N;
        Scalar m = src[0];
        for (std::int64_t i = 1; i < N; ++i) m = std::max(m, src[i]);
        Scalar s = 0;
        for (std::int64_t i = 0; i < N; ++i) {
            dst[i] = std::exp(src[i] - m);
            s += dst[i];
        }
        const Scalar inv = 1.0 / s;
        for (std::int64_t i = 0; i < N; ++i) dst[i] *= inv;
    }
    return g.emit(std::move(y), {x}, [x, rows, N](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        const Tensor& yv = gg.val(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t row = 0; row < rows; ++row) {
            const Scalar* yd = yv.data() + row * N;
            const Scalar* god = go.data() + row * N;
            Scalar* gxd = gx.data() + row * N;
            Scalar dot = 0;
            for (std::int64_t i = 0; i < N; ++i) dot += god[i] * yd[i];
            for (std::int64_t i = 0; i < N; ++i) gxd[i] += yd[i] * (god[i] - dot);
        }
    });
}

// Batched matmul on rank-3 tensors: (B,M,K) x (B,K,N) -> (B,M,N), with
// optional transposition of either operand (shapes given pre-transpose).
inline Var bmm(Graph& g, Var a, Var b, bool ta = false, bool tb = false) {
    const Tensor& av = g.val(a);
    const Tensor& bv = g.val(b);
    require_rank(av, 3, "bmm");
    require_rank(bv, 3, "bmm");
    if (av.dim(0) != bv.dim(0)) throw ShapeError("bmm: batch dims differ");
    const std::int64_t Bn = av.dim(0);
    const std::int64_t M = ta ? av.dim(2) : av.dim(1);
    const std::int64_t Ka = ta ? av.dim(1) : av.dim(2);
    const std::int64_t Kb = tb ? bv.dim(2) : bv.dim(1);
    const std::int64_t N = tb ? bv.dim(1) : bv.dim(2);
    if (Ka != Kb) throw ShapeError("bmm: inner dims differ");
    Tensor y({Bn, M, N});
    for (std::int64_t i = 0; i < Bn; ++i) {
        CMapM A(av.data() + i * av.dim(1) * av.dim(2), av.dim(1), av.dim(2));
        CMapM Bm(bv.data() + i * bv.dim(1) * bv.dim(2), bv.dim(1), bv.dim(2));
        MapM Y(y.data() + i * M * N, M, N);
        if (!ta && !tb)
            Y.noalias() = A * Bm;
        else if (!ta && tb)
            Y.noalias() = A * Bm.transpose();
        else if (ta && !tb)
            Y.noalias() = A.transpose() * Bm;
        else
            Y.noalias() = A.transpose() * Bm.transpose();
    }
    return g.emit(std::move(y), {a, b}, [a, b, ta, tb, Bn, M, N](Graph& gg, Var self) {
        const Tensor& go = gg.grad(self);
        const Tensor& av2 = gg.val(a);
        const Tensor& bv2 = gg.val(b);
        const bool na = gg.requires_grad(a);
        const bool nb = gg.requires_grad(b);
        for (std::int64_t i = 0; i < Bn; ++i) {
            CMapM Go(go.data() + i * M * N, M, N);
            CMapM A(av2.data() + i * av2.dim(1) * av2.dim(2), av2.dim(1), av2.dim(2));
            CMapM Bm(bv2.data() + i * bv2.dim(1) * bv2.dim(2), bv2.dim(1), bv2.dim(2));
            if (na) {
                MapM Ga(gg.grad(a).data() + i * av2.dim(1) * av2.dim(2), av2.dim(1), av2.dim(2));
                // dC/dA with C = op(A) op(B): untranspose as needed.
                if (!ta)
                    Ga.noalias() += tb ? (Go * Bm).eval() : (Go * Bm.transpose()).eval();
                else
                    Ga.noalias() += tb ? (Bm.transpose() * Go.transpose()).eval() : (Bm * Go.transpose()).eval();
            }
            if (nb) {
                MapM Gb(gg.grad(b).data() + i * bv2.dim(1) * bv2.dim(2), bv2.dim(1), bv2.dim(2));
                if (!tb)
                    Gb.noalias() += ta ? (A * Go).eval() : (A.transpose() * Go).eval();
                else
                    Gb.noalias() += ta ? (Go.transpose() * A.transpose()).eval() : (Go.transpose() * A).eval();
            }
        }
    });
}

}  // namespace ultrabm::ops
