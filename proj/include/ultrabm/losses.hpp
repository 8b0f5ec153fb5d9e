// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

#include "ultrabm/extractor.hpp"
#include "ultrabm/nn.hpp"
#include "ultrabm/ops.hpp"

namespace ultrabm::losses {

// Channel statistics of the natural-image distribution used by the
// self-regularized luminance term.
struct NaturalStats {
    static constexpr std::array<Scalar, 3> mu{0.485, 0.456, 0.406};
    static constexpr std::array<Scalar, 3> sigma{0.229, 0.224, 0.225};
};

struct LossWeights {
    Scalar luminance = 1.0;
    Scalar illum_smooth = 1.0;
    Scalar reconstruction = 1.0;
    Scalar perceptual = 1.2;
};

// Perceptual stage weights for feature levels 1..5.
inline const std::vector<Scalar>& default_stage_weights() {
    static const std::vector<Scalar> w{0.1, 0.1, 1.0, 1.0, 1.0};
    return w;
}

// ---------------------------------------------------------------------------
// Self-regularized luminance loss
// ---------------------------------------------------------------------------

// mean_c [ exp(|v_bar_c - (mu_c + sigma_c)|) - 1 ]. With the alternative
// tolerance-band reading the exponent is |v_bar_c - mu_c| - sigma_c
// (off by default; can dip below zero, documented in the README).
//
// Exponents beyond kLumExpCap continue linearly with slope exp(cap): the
// value and first derivative match at the cap, so the loss is C^1, cannot
// overflow, and its restoring force on runaway reflection means stays
// bounded. Channel means within cap of the target (the entire plausible
// image range) see the exact exponential.
constexpr Scalar kLumExpCap = 2.0;

inline Var luminance_loss(Graph& g, Var v, bool tolerance_band = false) {
    if (g.val(v).rank() != 4 || g.val(v).dim(1) != 3)
        throw ShapeError("luminance_loss: need (B,3,H,W), got " + g.val(v).shape_str());
    Var means = ops::channel_mean(g, v);
    Var e;
    if (!tolerance_band) {
        Tensor target({3});
        for (int c = 0; c < 3; ++c) target[c] = NaturalStats::mu[static_cast<std::size_t>(c)] +
                                                NaturalStats::sigma[static_cast<std::size_t>(c)];
        e = ops::abs(g, ops::sub(g, means, g.constant(target)));
    } else {
        Tensor mu({3}), sig({3});
        for (int c = 0; c < 3; ++c) {
            mu[c] = NaturalStats::mu[static_cast<std::size_t>(c)];
            sig[c] = NaturalStats::sigma[static_cast<std::size_t>(c)];
        }
        e = ops::sub(g, ops::abs(g, ops::sub(g, means, g.constant(mu))), g.constant(sig));
    }
    Var capped = ops::clamp(g, e, -1e30, kLumExpCap);
    Var overflow = ops::mul_scalar(g, ops::sub(g, e, capped), std::exp(kLumExpCap));
    Var elem = ops::add(g, ops::add_scalar(g, ops::exp(g, capped), -1.0), overflow);
    return ops::mean_all(g, elem);
}

inline Scalar luminance_loss(const Tensor& v, bool tolerance_band = false) {
    Graph g;
    return g.val(luminance_loss(g, g.leaf(v), tolerance_band))[0];
}

// ---------------------------------------------------------------------------
// Illumination smoothness loss
// ---------------------------------------------------------------------------

// Element-mean SmoothL1 of (u - gray); gray broadcasts across u's channels.
inline Var illum_smooth_loss(Graph& g, Var u, Var gray) {
    const Tensor& uv = g.val(u);
    const Tensor& gv = g.val(gray);
    if (uv.rank() != 4 || gv.rank() != 4 || uv.dim(0) != gv.dim(0) || uv.dim(2) != gv.dim(2) ||
        uv.dim(3) != gv.dim(3) || (gv.dim(1) != 1 && gv.dim(1) != uv.dim(1)))
        throw ShapeError("illum_smooth_loss: incompatible shapes " + uv.shape_str() + " vs " +
                         gv.shape_str());
    return ops::mean_all(g, ops::smooth_l1(g, ops::sub(g, u, gray)));
}

inline Scalar illum_smooth_loss(const Tensor& u, const Tensor& gray) {
    Graph g;
    return g.val(illum_smooth_loss(g, g.leaf(u), g.leaf(gray)))[0];
}

// ---------------------------------------------------------------------------
// Reconstruction loss
// ---------------------------------------------------------------------------

inline Var recon_loss(Graph& g, Var y, Var ref) {
    require_same_shape(g.val(y), g.val(ref), "recon_loss");
    return ops::mean_all(g, ops::abs(g, ops::sub(g, y, ref)));
}

inline Scalar recon_loss(const Tensor& y, const Tensor& ref) {
    Graph g;
    return g.val(recon_loss(g, g.leaf(y), g.leaf(ref)))[0];
}

// ---------------------------------------------------------------------------
// Perceptual loss
// ---------------------------------------------------------------------------

// Weighted size-normalized L1 between two feature stacks: each stage
// contributes w_j * mean|f_y - f_ref|, which equals the 1/(c_j h_j w_j)
// normalization averaged over the batch.
inline Var weighted_feature_l1(Graph& g, const std::vector<Var>& feat_y,
                               const std::vector<Var>& feat_ref, const std::vector<Scalar>& weights) {
    if (feat_y.size() != feat_ref.size() || feat_y.size() != weights.size())
        throw ConfigError("weighted_feature_l1: stage count mismatch");
    Var total;
    for (std::size_t j = 0; j < feat_y.size(); ++j) {
        Var d = ops::mean_all(g, ops::abs(g, ops::sub(g, feat_y[j], feat_ref[j])));
        d = ops::mul_scalar(g, d, weights[j]);
        total = total.valid() ? ops::add(g, total, d) : d;
    }
    return total;
}

inline Var perceptual_loss(nn::Binder& bind, const FeatureExtractor& extractor, Var y, Var ref,
                           const std::vector<Scalar>& stage_weights = default_stage_weights()) {
    if (extractor.stage_count() != 5)
        throw ConfigError("perceptual_loss: extractor must expose 5 stages, has " +
                          std::to_string(extractor.stage_count()));
    return weighted_feature_l1(bind.graph(), extractor.forward(bind, y), extractor.forward(bind, ref),
                               stage_weights);
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

inline Var total_loss(Graph& g, Var l_sl, Var l_is, Var l_r, Var l_p, const LossWeights& w = {}) {
    Var total = ops::mul_scalar(g, l_sl, w.luminance);
    total = ops::add(g, total, ops::mul_scalar(g, l_is, w.illum_smooth));
    total = ops::add(g, total, ops::mul_scalar(g, l_r, w.reconstruction));
    return ops::add(g, total, ops::mul_scalar(g, l_p, w.perceptual));
}

inline Scalar total_loss(const std::array<Scalar, 4>& components, const LossWeights& w = {}) {
    return w.luminance * components[0] + w.illum_smooth * components[1] +
           w.reconstruction * components[2] + w.perceptual * components[3];
}

}  // namespace ultrabm::losses
