// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ultrabm/image.hpp"
#include "ultrabm/nn.hpp"
#include "ultrabm/ops.hpp"
#include "ultrabm/tensor.hpp"

namespace ultrabm::retinex {

// Illumination floor: Retinex division and its gradients stay well-posed
// because the illumination head rescales into [kIllumFloor, 1].
constexpr Scalar kIllumFloor = 1e-4;
constexpr Scalar kReflectCeil = 1.0 / kIllumFloor;

// Local-contrast residual guidance: u = clamp(x + (x - mean3x3(x)), 0, 1)
// with mirrored borders. Input data only, so no gradient path is needed.
inline Tensor neighborhood_diff(const Tensor& x) {
    require_rank(x, 4, "neighborhood_diff");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto mirror = [](std::int64_t i, std::int64_t n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };
    Tensor y(x.shape());
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
                for (std::int64_t w = 0; w < W; ++w) {
                    Scalar m = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx)
                            m += x.at(b, c, mirror(h + dy, H), mirror(w + dx, W));
                    m /= 9.0;
                    const Scalar v = 2.0 * x.at(b, c, h, w) - m;
                    y.at(b, c, h, w) = std::min(std::max(v, Scalar(0)), Scalar(1));
                }
    return y;
}

inline image::ImageTensor neighborhood_diff(const image::ImageTensor& x) {
    image::ImageTensor out;
    out.data = neighborhood_diff(x.data);
    return out;
}

// Element-wise Retinex division v = clamp(x / u, 0, 1/kIllumFloor).
inline Var retinex_divide(Graph& g, Var x, Var u) {
    require_same_shape(g.val(x), g.val(u), "retinex_divide");
    return ops::clamp(g, ops::div(g, x, u), 0.0, kReflectCeil);
}

inline Tensor retinex_divide(const Tensor& x, const Tensor& u) {
    Graph g;
    return g.val(retinex_divide(g, g.leaf(x), g.leaf(u))).clone();
}

struct DecompositionResult {
    Tensor u_ig;  // illumination guidance
    Tensor u_nl;  // illumination map, entries in [kIllumFloor, 1]
    Tensor v_nl;  // reflection map
};

// ---------------------------------------------------------------------------
// U-Net backbone shared by both streams
// ---------------------------------------------------------------------------

// Per-level decoder hook: (level k in 1..5, feature) -> feature. The
// reflection stream hangs its modulation middleware here.
using DecoderHook = std::function<Var(int, Var)>;

inline Var identity_hook_fn(int, Var f) { return f; }

// 5-level encoder/decoder built from Context Units, MaxPool downsampling
// and bilinear upsampling. Decoder features are exposed per level.
struct UNet {
    int levels = 5;
    std::vector<std::int64_t> widths;
    nn::Conv2dLayer stem;
    std::vector<nn::ContextUnit> enc;    // levels 1..5
    std::vector<nn::Conv2dLayer> down;   // k -> k+1 transitions
    std::vector<nn::Conv2dLayer> up;     // k+1 -> k transitions
    std::vector<nn::Conv2dLayer> fuse;   // after skip concat
    std::vector<nn::ContextUnit> dec;    // levels 4..1

    static UNet create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t in_ch,
                       std::int64_t base, int levels = 5, bool trainable = true) {
        UNet net;
        net.levels = levels;
        for (int k = 0; k < levels; ++k) net.widths.push_back(base << k);
        net.stem = nn::Conv2dLayer::create(ps, rng, name + ".stem", in_ch, net.widths[0], 3, 1, 1,
                                           nn::Init::HeNormal, true, trainable);
        for (int k = 0; k < levels; ++k)
            net.enc.push_back(nn::ContextUnit::create(ps, rng, name + ".enc" + std::to_string(k + 1),
                                                      net.widths[static_cast<std::size_t>(k)], trainable));
        for (int k = 0; k + 1 < levels; ++k) {
            net.down.push_back(nn::Conv2dLayer::create(
                ps, rng, name + ".down" + std::to_string(k + 1), net.widths[static_cast<std::size_t>(k)],
                net.widths[static_cast<std::size_t>(k + 1)], 3, 1, 1, nn::Init::HeNormal, true, trainable));
            net.up.push_back(nn::Conv2dLayer::create(
                ps, rng, name + ".up" + std::to_string(k + 1), net.widths[static_cast<std::size_t>(k + 1)],
                net.widths[static_cast<std::size_t>(k)], 3, 1, 1, nn::Init::HeNormal, true, trainable));
            net.fuse.push_back(nn::Conv2dLayer::create(
                ps, rng, name + ".fuse" + std::to_string(k + 1),
                2 * net.widths[static_cast<std::size_t>(k)], net.widths[static_cast<std::size_t>(k)], 3, 1,
                1, nn::Init::HeNormal, true, trainable));
            net.dec.push_back(nn::ContextUnit::create(ps, rng, name + ".dec" + std::to_string(k + 1),
                                                      net.widths[static_cast<std::size_t>(k)], trainable));
        }
        return net;
    }

    // Returns decoder features d[0..levels-1] where d[k-1] is level k
    // (full resolution at k=1, spatial halving per level).
    std::vector<Var> forward(nn::Binder& bind, Var x, const DecoderHook& hook = identity_hook_fn) const {
        Graph& g = bind.graph();
        const Tensor& xv = g.val(x);
        require_rank(xv, 4, "UNet");
        const std::int64_t div = std::int64_t(1) << (levels - 1);
        if (xv.dim(2) % div || xv.dim(3) % div)
            throw ShapeError("UNet: spatial dims must be divisible by " + std::to_string(div) + ", got " +
                             xv.shape_str());

        std::vector<Var> skips;
        Var h = enc[0](bind, stem(bind, x));
        skips.push_back(h);
        for (int k = 1; k < levels; ++k) {
            h = ops::maxpool2(g, h);
            h = down[static_cast<std::size_t>(k - 1)](bind, h);
            h = enc[static_cast<std::size_t>(k)](bind, h);
            skips.push_back(h);
        }

        std::vector<Var> features(static_cast<std::size_t>(levels));
        Var d = hook(levels, skips.back());
        features[static_cast<std::size_t>(levels - 1)] = d;
        for (int k = levels - 1; k >= 1; --k) {
            Var u = ops::upsample(g, d, 2, ops::Interp::Bilinear);
            u = up[static_cast<std::size_t>(k - 1)](bind, u);
            Var f = ops::concat_ch(g, u, skips[static_cast<std::size_t>(k - 1)]);
            f = fuse[static_cast<std::size_t>(k - 1)](bind, f);
            f = dec[static_cast<std::size_t>(k - 1)](bind, f);
            d = hook(k, f);
            features[static_cast<std::size_t>(k - 1)] = d;
        }
        return features;
    }
};

// Illumination stream: U-Net on the guidance image, head rescaled into
// [kIllumFloor, 1] via sigmoid.
struct IllumUNet {
    UNet net;
    nn::LayerNormChLayer head_norm;
    nn::Conv2dLayer head;

    static IllumUNet create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t base) {
        IllumUNet m;
        m.net = UNet::create(ps, rng, name + ".unet", 3, base);
        // LayerNorm bounds the head's input scale (the illumination logits
        // otherwise inherit unbounded feature magnitudes), and the negative
        // head bias centers the initial map near 0.2, the operating region
        // for dark inputs. Both keep the Retinex division well-conditioned
        // early in training.
        m.head_norm = nn::LayerNormChLayer::create(ps, name + ".head_norm", base);
        m.head = nn::Conv2dLayer::create(ps, rng, name + ".head", base, 3, 3);
        ps.at(m.head.b).value.fill(-1.386294361119890619);  // sigmoid^-1(0.2)
        return m;
    }

    struct Result {
        Var u_nl;
        std::vector<Var> features;  // I_f^(k), k = 1..5
    };

    Result forward(nn::Binder& bind, Var u_ig) const {
        Graph& g = bind.graph();
        Result r;
        r.features = net.forward(bind, u_ig);
        Var z = head(bind, head_norm(bind, r.features[0]));
        r.u_nl = ops::add_scalar(g, ops::mul_scalar(g, ops::sigmoid(g, z), 1.0 - kIllumFloor), kIllumFloor);
        return r;
    }
};

}  // namespace ultrabm::retinex
