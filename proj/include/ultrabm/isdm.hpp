// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ultrabm/nn.hpp"
#include "ultrabm/ops.hpp"
#include "ultrabm/tensor.hpp"
#include "ultrabm/tensor_file.hpp"

namespace ultrabm::isdm {

// ---------------------------------------------------------------------------
// Channel cross-attention modulation unit (shared by IMU and SMU)
// ---------------------------------------------------------------------------

// One modulation unit: the modulator stream (illumination or semantic)
// attends over the reflection stream's channels, the response gates the
// reflection features through a sigmoid, and a gated-dconv feed-forward
// refines the result. The residual connection plus a zero-initialized
// FFN output projection make the unit an exact identity at init.
struct ModUnit {
    nn::LayerNormChLayer ln_mod, ln_ref;
    nn::Conv2dLayer dw_mod, dw_ref;  // depth-wise 3x3 after LN
    nn::Conv2dLayer value;           // 1x1 value transform of the reflection features
    nn::Conv2dLayer ffn_in;          // 1x1 C -> 2h
    nn::Conv2dLayer ffn_dw;          // 3x3 depth-wise on 2h
    nn::Conv2dLayer ffn_out;         // 1x1 h -> C, zero-initialized
    std::int64_t channels = 0;
    std::int64_t hidden = 0;

    static ModUnit create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t c,
                          Scalar ffn_expansion = 2.66) {
        ModUnit u;
        u.channels = c;
        u.hidden = static_cast<std::int64_t>(std::floor(static_cast<Scalar>(c) * ffn_expansion + 0.5));
        u.ln_mod = nn::LayerNormChLayer::create(ps, name + ".ln_mod", c);
        u.ln_ref = nn::LayerNormChLayer::create(ps, name + ".ln_ref", c);
        u.dw_mod = nn::Conv2dLayer::create(ps, rng, name + ".dw_mod", c, c, 3, 1, static_cast<int>(c));
        u.dw_ref = nn::Conv2dLayer::create(ps, rng, name + ".dw_ref", c, c, 3, 1, static_cast<int>(c));
        u.value = nn::Conv2dLayer::create(ps, rng, name + ".value", c, c, 1);
        u.ffn_in = nn::Conv2dLayer::create(ps, rng, name + ".ffn_in", c, 2 * u.hidden, 1);
        u.ffn_dw = nn::Conv2dLayer::create(ps, rng, name + ".ffn_dw", 2 * u.hidden, 2 * u.hidden, 3, 1,
                                           static_cast<int>(2 * u.hidden));
        u.ffn_out =
            nn::Conv2dLayer::create(ps, rng, name + ".ffn_out", u.hidden, c, 1, 1, 1, nn::Init::Zero);
        return u;
    }

    // (B,C,C) attention map; rows are softmax-normalized with a 1/sqrt(HW)
    // temperature on the channel Gram logits.
    Var attention(nn::Binder& bind, Var modulator, Var reflect) const {
        Graph& g = bind.graph();
        require_same_shape(g.val(modulator), g.val(reflect), "channel_attention");
        const Tensor& mv = g.val(modulator);
        const std::int64_t B = mv.dim(0), C = mv.dim(1), H = mv.dim(2), W = mv.dim(3);
        if (C != channels) throw ShapeError("channel_attention: channel count mismatch");
        Var q = dw_mod(bind, ln_mod(bind, modulator));
        Var k = dw_ref(bind, ln_ref(bind, reflect));
        Var q3 = ops::reshape(g, q, {B, C, H * W});
        Var k3 = ops::reshape(g, k, {B, C, H * W});
        Var logits = ops::bmm(g, q3, k3, false, true);
        logits = ops::mul_scalar(g, logits, 1.0 / std::sqrt(static_cast<Scalar>(H * W)));
        return ops::softmax_last(g, logits);
    }

    Var forward(nn::Binder& bind, Var modulator, Var reflect) const {
        Graph& g = bind.graph();
        const Tensor& rv = g.val(reflect);
        const std::int64_t B = rv.dim(0), C = rv.dim(1), H = rv.dim(2), W = rv.dim(3);
        Var att = attention(bind, modulator, reflect);
        Var v3 = ops::reshape(g, value(bind, reflect), {B, C, H * W});
        Var mod3 = ops::bmm(g, att, v3);
        Var gated = ops::sigmoid(g, ops::reshape(g, mod3, {B, C, H, W}));
        // Gated-dconv feed-forward.
        Var t = ffn_dw(bind, ffn_in(bind, gated));
        Var x1 = ops::slice_ch(g, t, 0, hidden);
        Var x2 = ops::slice_ch(g, t, hidden, 2 * hidden);
        Var ffn = ffn_out(bind, ops::mul(g, ops::gelu(g, x1), x2));
        return ops::add(g, ffn, reflect);
    }
};

// Free-function spec surface.
inline Var channel_attention(nn::Binder& bind, const ModUnit& params, Var a, Var b) {
    return params.attention(bind, a, b);
}

inline Var imu_forward(nn::Binder& bind, const ModUnit& params, Var i_f, Var r_f) {
    return params.forward(bind, i_f, r_f);
}

inline Var smu_forward(nn::Binder& bind, const ModUnit& params, Var s_f, Var r_tilde) {
    return params.forward(bind, s_f, r_tilde);
}

// ---------------------------------------------------------------------------
// Per-level ISDM block
// ---------------------------------------------------------------------------

struct IsdmLevel {
    bool use_imu = true;
    bool use_smu = true;
    ModUnit imu;
    ModUnit smu;
    nn::Conv2dLayer sem_proj;  // 1x1 projection of semantic features onto C_k

    static IsdmLevel create(nn::ParamStore& ps, Rng& rng, const std::string& name, std::int64_t c,
                            std::int64_t sem_c, bool use_imu, bool use_smu) {
        IsdmLevel l;
        l.use_imu = use_imu;
        l.use_smu = use_smu;
        if (use_imu) l.imu = ModUnit::create(ps, rng, name + ".imu", c);
        if (use_smu) {
            l.smu = ModUnit::create(ps, rng, name + ".smu", c);
            l.sem_proj = nn::Conv2dLayer::create(ps, rng, name + ".sem_proj", sem_c, c, 1);
        }
        return l;
    }

    Var forward(nn::Binder& bind, Var i_f, Var s_f, Var r_f) const {
        Var r = r_f;
        if (use_imu) r = imu.forward(bind, i_f, r);
        if (use_smu) r = smu.forward(bind, sem_proj(bind, s_f), r);
        return r;
    }
};

// ---------------------------------------------------------------------------
// Semantic feature source
// ---------------------------------------------------------------------------

// Frozen 5-stage strided CNN standing in for a pretrained semantic
// network. Seeded independently of the model seed so its features are a
// fixed function of the input; training never updates it.
struct SemanticEncoder {
    std::vector<nn::Conv2dLayer> stages;
    std::vector<std::int64_t> widths;

    static SemanticEncoder create(nn::ParamStore& ps, const std::string& name, std::int64_t base,
                                  int levels = 5, std::uint64_t seed = 0) {
        Rng rng(seed);
        SemanticEncoder enc;
        std::int64_t in_c = 3;
        for (int k = 0; k < levels; ++k) {
            const std::int64_t out_c = base << k;
            enc.stages.push_back(nn::Conv2dLayer::create(ps, rng, name + ".s" + std::to_string(k + 1),
                                                         in_c, out_c, 3, k == 0 ? 1 : 2, 1,
                                                         nn::Init::HeNormal, true, /*trainable=*/false));
            enc.widths.push_back(out_c);
            in_c = out_c;
        }
        return enc;
    }

    std::vector<Var> forward(nn::Binder& bind, Var x) const {
        Graph& g = bind.graph();
        std::vector<Var> feats;
        Var h = x;
        for (const auto& s : stages) {
            h = ops::leaky_relu(g, s(bind, h));
            feats.push_back(h);
        }
        return feats;
    }
};

// Either the built-in frozen encoder or a file of precomputed pyramids
// (entries "s1".."s5").
struct SemanticSource {
    enum class Mode { Builtin, External };
    Mode mode = Mode::Builtin;
    const SemanticEncoder* encoder = nullptr;
    const TensorFile* features = nullptr;
};

// Produces S_f^(1..5) for input x. External features are validated
// against the shapes the built-in encoder would produce.
inline std::vector<Var> semantic_features(nn::Binder& bind, const SemanticSource& src, Var x) {
    Graph& g = bind.graph();
    require_rank(g.val(x), 4, "semantic_features");
    const std::int64_t xb = g.val(x).dim(0);
    if (src.mode == SemanticSource::Mode::Builtin) {
        if (!src.encoder) throw ConfigError("semantic_features: no encoder bound");
        return src.encoder->forward(bind, x);
    }
    if (!src.features) throw ConfigError("semantic_features: no feature file bound");
    if (!src.encoder) throw ConfigError("semantic_features: encoder needed to validate external shapes");
    std::vector<Var> feats;
    std::int64_t h = g.val(x).dim(2), w = g.val(x).dim(3);
    for (std::size_t k = 0; k < src.encoder->widths.size(); ++k) {
        const std::string key = "s" + std::to_string(k + 1);
        if (!src.features->has(key))
            throw ValidationError("semantic_features: external file missing entry '" + key + "'");
        const Tensor& t = src.features->get(key);
        if (k > 0) {
            h = h / 2;
            w = w / 2;
        }
        const std::vector<std::int64_t> want{xb, src.encoder->widths[k], h, w};
        if (t.shape() != want)
            throw ValidationError("semantic_features: entry '" + key + "' has shape " + t.shape_str() +
                                  ", expected (" + std::to_string(want[0]) + "," + std::to_string(want[1]) +
                                  "," + std::to_string(want[2]) + "," + std::to_string(want[3]) + ")");
        feats.push_back(g.constant(t));
    }
    return feats;
}

}  // namespace ultrabm::isdm
