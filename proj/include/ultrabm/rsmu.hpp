// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "ultrabm/nn.hpp"
#include "ultrabm/ops.hpp"

namespace ultrabm::rsmu {

// Three parallel features of one stage at 1x/2x/4x the base resolution,
// all with the same channel width.
struct ScaleBundle {
    Var u1, u2, u4;
};

inline void validate_bundle(Graph& g, const ScaleBundle& b, const char* who) {
    const Tensor& a = g.val(b.u1);
    const Tensor& c2 = g.val(b.u2);
    const Tensor& c4 = g.val(b.u4);
    require_rank(a, 4, who);
    const std::int64_t C = a.dim(1), H = a.dim(2), W = a.dim(3);
    auto expect = [&](const Tensor& t, std::int64_t f) {
        if (t.dim(1) != C || t.dim(2) != H * f || t.dim(3) != W * f)
            throw ShapeError(std::string(who) + ": bundle member has shape " + t.shape_str() +
                             ", expected scale " + std::to_string(f) + " of " + a.shape_str());
    };
    expect(c2, 2);
    expect(c4, 4);
}

// ---------------------------------------------------------------------------
// Selective kernel feature fusion
// ---------------------------------------------------------------------------

struct SkffParams {
    nn::Conv2dLayer squeeze;                   // 1x1 C -> Cr bottleneck
    std::array<nn::Conv2dLayer, 3> branch_fc;  // 1x1 Cr -> C per branch

    static SkffParams create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t c) {
        SkffParams p;
        const std::int64_t cr = std::max<std::int64_t>(c / 8, 4);
        p.squeeze = nn::Conv2dLayer::create(ps, rng, name + ".squeeze", c, cr, 1);
        for (int i = 0; i < 3; ++i)
            p.branch_fc[static_cast<std::size_t>(i)] =
                nn::Conv2dLayer::create(ps, rng, name + ".fc" + std::to_string(i + 1), cr, c, 1);
        return p;
    }
};

// Per-channel branch weights: softmax across the three branches of the
// pooled-sum descriptor. Each returned map is (B,C,1,1).
inline std::array<Var, 3> skff_weights(nn::Binder& bind, const SkffParams& p,
                                       const std::array<Var, 3>& branches) {
    Graph& g = bind.graph();
    require_same_shape(g.val(branches[0]), g.val(branches[1]), "skff_fuse");
    require_same_shape(g.val(branches[0]), g.val(branches[2]), "skff_fuse");
    Var s = ops::add(g, ops::add(g, branches[0], branches[1]), branches[2]);
    Var z = ops::leaky_relu(g, p.squeeze(bind, ops::global_avg_pool(g, s)));
    std::array<Var, 3> logits{};
    for (int i = 0; i < 3; ++i)
        logits[static_cast<std::size_t>(i)] = p.branch_fc[static_cast<std::size_t>(i)](bind, z);
    // Max-stabilized softmax across the three branches.
    Var m = ops::max(g, ops::max(g, logits[0], logits[1]), logits[2]);
    std::array<Var, 3> e{};
    for (int i = 0; i < 3; ++i)
        e[static_cast<std::size_t>(i)] =
            ops::exp(g, ops::sub(g, logits[static_cast<std::size_t>(i)], m));
    Var denom = ops::add(g, ops::add(g, e[0], e[1]), e[2]);
    return {ops::div(g, e[0], denom), ops::div(g, e[1], denom), ops::div(g, e[2], denom)};
}

inline Var skff_fuse(nn::Binder& bind, const SkffParams& p, const std::array<Var, 3>& branches) {
    Graph& g = bind.graph();
    const auto w = skff_weights(bind, p, branches);
    Var out = ops::mul(g, w[0], branches[0]);
    out = ops::add(g, out, ops::mul(g, w[1], branches[1]));
    return ops::add(g, out, ops::mul(g, w[2], branches[2]));
}

// ---------------------------------------------------------------------------
// Feature Self-Integration
// ---------------------------------------------------------------------------

// Cross-scale exchange: per output level j the three inputs are brought to
// level j (identity at i=j, strided-conv chains when j<i, bilinear when
// j>i) and fused selectively. Exactly one resampling rule fires per (i,j).
struct FsiParams {
    nn::Conv2dLayer down_2to1;            // stride-2
    nn::Conv2dLayer down_4to2;            // stride-2
    nn::Conv2dLayer down_4to1_a, down_4to1_b;  // two chained stride-2
    std::array<SkffParams, 3> fuse;       // output levels j = 1, 2, 4

    static FsiParams create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t c) {
        FsiParams p;
        p.down_2to1 = nn::Conv2dLayer::create(ps, rng, name + ".d21", c, c, 3, 2);
        p.down_4to2 = nn::Conv2dLayer::create(ps, rng, name + ".d42", c, c, 3, 2);
        p.down_4to1_a = nn::Conv2dLayer::create(ps, rng, name + ".d41a", c, c, 3, 2);
        p.down_4to1_b = nn::Conv2dLayer::create(ps, rng, name + ".d41b", c, c, 3, 2);
        p.fuse[0] = SkffParams::create(ps, rng, name + ".skff1", c);
        p.fuse[1] = SkffParams::create(ps, rng, name + ".skff2", c);
        p.fuse[2] = SkffParams::create(ps, rng, name + ".skff4", c);
        return p;
    }
};

// Resamples input level i to output level j (i, j in {1,2,4}).
inline Var fsi_resample(nn::Binder& bind, const FsiParams& p, Var u, int i, int j) {
    Graph& g = bind.graph();
    if (i == j) return u;                                            // identity
    if (j > i) return ops::upsample(g, u, j / i, ops::Interp::Bilinear);  // j/i in {2,4}
    if (i == 2 && j == 1) return p.down_2to1(bind, u);
    if (i == 4 && j == 2) return p.down_4to2(bind, u);
    return p.down_4to1_b(bind, p.down_4to1_a(bind, u));              // i=4, j=1
}

inline ScaleBundle fsi_forward(nn::Binder& bind, const FsiParams& p, const ScaleBundle& in) {
    Graph& g = bind.graph();
    validate_bundle(g, in, "fsi_forward");
    const std::array<std::pair<int, Var>, 3> src{{{1, in.u1}, {2, in.u2}, {4, in.u4}}};
    auto level = [&](int j, const SkffParams& fuse) {
        std::array<Var, 3> branches{};
        for (std::size_t s = 0; s < 3; ++s)
            branches[s] = fsi_resample(bind, p, src[s].second, src[s].first, j);
        return skff_fuse(bind, fuse, branches);
    };
    ScaleBundle out;
    out.u1 = level(1, p.fuse[0]);
    out.u2 = level(2, p.fuse[1]);
    out.u4 = level(4, p.fuse[2]);
    validate_bundle(g, out, "fsi_forward(out)");
    return out;
}

// ---------------------------------------------------------------------------
// One 2x up-sampling stage and the full head
// ---------------------------------------------------------------------------

// Substrate generators: channel-expanding convs feeding pixel shuffle so
// every scale keeps width C.
struct StageParams {
    nn::Conv2dLayer sub1;  // C -> C    (1x substrate)
    nn::Conv2dLayer sub2;  // C -> 4C   -> shuffle r=2
    nn::Conv2dLayer sub4;  // C -> 16C  -> shuffle r=4
    FsiParams fsi;
    bool use_fsi = true;

    static StageParams create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t c,
                              bool use_fsi) {
        StageParams p;
        p.use_fsi = use_fsi;
        p.sub1 = nn::Conv2dLayer::create(ps, rng, name + ".sub1", c, c, 3);
        p.sub2 = nn::Conv2dLayer::create(ps, rng, name + ".sub2", c, 4 * c, 3);
        p.sub4 = nn::Conv2dLayer::create(ps, rng, name + ".sub4", c, 16 * c, 3);
        if (use_fsi) p.fsi = FsiParams::create(ps, rng, name + ".fsi", c);
        return p;
    }

    ScaleBundle substrates(nn::Binder& bind, Var x) const {
        Graph& g = bind.graph();
        ScaleBundle b;
        b.u1 = sub1(bind, x);
        b.u2 = ops::pixel_shuffle(g, sub2(bind, x), 2);
        b.u4 = ops::pixel_shuffle(g, sub4(bind, x), 4);
        return b;
    }

    // Stage output is the 2x level of the (optionally FSI-exchanged) bundle.
    Var forward(nn::Binder& bind, Var x) const {
        ScaleBundle b = substrates(bind, x);
        if (use_fsi) b = fsi_forward(bind, fsi, b);
        return b.u2;
    }
};

// Full up-sampling head: chained 2x stages to the target scale, a 3-channel
// projection, a bicubic global residual from the stage-two input image,
// and a sigmoid onto [0,1]. With use_rsmu=false the stages are replaced by
// plain bilinear up-sampling (the "Bilinear" ablation).
struct RsmuHead {
    int target_scale = 2;
    bool use_rsmu = true;
    std::vector<StageParams> stages;
    nn::LayerNormChLayer proj_norm;  // bounds the projection's input scale
    nn::Conv2dLayer proj;            // C -> 3
    nn::Conv2dLayer res_proj;        // 3 -> 3 on the bicubic-upsampled residual image

    static RsmuHead create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t c,
                           int target_scale, bool use_rsmu = true, bool use_fsi = true) {
        if (target_scale != 2 && target_scale != 4)
            throw ConfigError("rsmu: target scale must be 2 or 4, got " + std::to_string(target_scale));
        if (use_rsmu && c % 16 != 0)
            throw ConfigError("rsmu: channel width must be divisible by 16, got " + std::to_string(c));
        RsmuHead h;
        h.target_scale = target_scale;
        h.use_rsmu = use_rsmu;
        if (use_rsmu)
            for (int s = 0; s < (target_scale == 2 ? 1 : 2); ++s)
                h.stages.push_back(StageParams::create(ps, rng, name + ".stage" + std::to_string(s + 1),
                                                       c, use_fsi));
        h.proj_norm = nn::LayerNormChLayer::create(ps, name + ".proj_norm", c);
        h.proj = nn::Conv2dLayer::create(ps, rng, name + ".proj", c, 3, 3);
        h.res_proj = nn::Conv2dLayer::create(ps, rng, name + ".res_proj", 3, 3, 1);
        return h;
    }

    Var forward(nn::Binder& bind, Var x, Var residual_image = {}) const {
        Graph& g = bind.graph();
        const Tensor& xv = g.val(x);
        require_rank(xv, 4, "rsmu_forward");
        if (use_rsmu && xv.dim(1) % 16 != 0)
            throw ShapeError("rsmu_forward: channels must be divisible by 16, got " + xv.shape_str());
        Var h = x;
        if (use_rsmu) {
            for (const auto& st : stages) h = st.forward(bind, h);
        } else {
            h = ops::upsample(g, h, target_scale, ops::Interp::Bilinear);
        }
        Var z = proj(bind, proj_norm(bind, h));
        if (residual_image.valid()) {
            // The skip treats the reflection map as an image: clamp to [0,1]
            // so clamp-ceiling excursions cannot blast the output logits.
            Var img = ops::clamp(g, residual_image, 0.0, 1.0);
            Var up = ops::upsample(g, img, target_scale, ops::Interp::Bicubic);
            z = ops::add(g, z, res_proj(bind, up));
        }
        return ops::sigmoid(g, z);
    }
};

}  // namespace ultrabm::rsmu
