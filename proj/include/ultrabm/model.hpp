// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "ultrabm/extractor.hpp"
#include "ultrabm/isdm.hpp"
#include "ultrabm/losses.hpp"
#include "ultrabm/retinex.hpp"
#include "ultrabm/rng.hpp"
#include "ultrabm/rsmu.hpp"

namespace ultrabm::pipeline {

struct Ablations {
    bool isdm = true;
    bool imu = true;
    bool smu = true;
    bool rsmu = true;
    bool fsi = true;
    bool l_sl = true;
    bool l_p = true;
};

struct ModelConfig {
    int scale = 2;
    int base_channels = 16;
    int levels = 5;
    std::uint64_t seed = 0;
    Ablations ablations;
    losses::LossWeights loss_weights;
    bool luminance_tolerance_band = false;

    void validate() const {
        if (scale != 2 && scale != 4) throw ConfigError("config: scale must be 2 or 4");
        if (levels != 5) throw ConfigError("config: the architecture is fixed at 5 feature levels");
        if (base_channels < 4) throw ConfigError("config: base_channels too small");
        if (ablations.rsmu && base_channels % 16 != 0)
            throw ConfigError("config: base_channels must be divisible by 16 to feed the 4x shuffle substrate");
        if (!ablations.isdm && (ablations.imu || ablations.smu))
            throw ConfigError("config: IMU/SMU cannot be enabled without ISDM");
    }

    nlohmann::json to_json() const {
        return {{"scale", scale},
                {"base_channels", base_channels},
                {"levels", levels},
                {"seed", seed},
                {"ablations",
                 {{"isdm", ablations.isdm},
                  {"imu", ablations.imu},
                  {"smu", ablations.smu},
                  {"rsmu", ablations.rsmu},
                  {"fsi", ablations.fsi},
                  {"l_sl", ablations.l_sl},
                  {"l_p", ablations.l_p}}},
                {"loss_weights",
                 {{"luminance", loss_weights.luminance},
                  {"illum_smooth", loss_weights.illum_smooth},
                  {"reconstruction", loss_weights.reconstruction},
                  {"perceptual", loss_weights.perceptual}}},
                {"luminance_tolerance_band", luminance_tolerance_band}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.scale = j.value("scale", 2);
        c.base_channels = j.value("base_channels", 16);
        c.levels = j.value("levels", 5);
        c.seed = j.value("seed", std::uint64_t(0));
        if (j.contains("ablations")) {
            const auto& a = j["ablations"];
            c.ablations.isdm = a.value("isdm", true);
            c.ablations.imu = a.value("imu", true);
            c.ablations.smu = a.value("smu", true);
            c.ablations.rsmu = a.value("rsmu", true);
            c.ablations.fsi = a.value("fsi", true);
            c.ablations.l_sl = a.value("l_sl", true);
            c.ablations.l_p = a.value("l_p", true);
        }
        if (j.contains("loss_weights")) {
            const auto& w = j["loss_weights"];
            c.loss_weights.luminance = w.value("luminance", 1.0);
            c.loss_weights.illum_smooth = w.value("illum_smooth", 1.0);
            c.loss_weights.reconstruction = w.value("reconstruction", 1.0);
            c.loss_weights.perceptual = w.value("perceptual", 1.2);
        }
        c.luminance_tolerance_band = j.value("luminance_tolerance_band", false);
        return c;
    }

    std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

struct ForwardResult {
    Tensor u_ig;  // guidance (data, pre-graph)
    Var u_nl;
    Var v_nl;
    Var y_ns;
};

// The full network: Retinex stage one, reflection U-Net with per-level
// dual modulation, and the merging up-sampler head.
struct Model {
    ModelConfig cfg;
    nn::ParamStore params;
    retinex::IllumUNet illum;
    retinex::UNet reflection;
    std::vector<isdm::IsdmLevel> modulation;  // level k at index k-1 (when ISDM on)
    isdm::SemanticEncoder semantic;           // frozen (when ISDM on)
    rsmu::RsmuHead head;
    losses::FeatureExtractor perceptual;      // frozen

    static Model build(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(cfg.seed);
        m.illum = retinex::IllumUNet::create(m.params, rng, "illum", cfg.base_channels);
        m.reflection = retinex::UNet::create(m.params, rng, "refl", 3, cfg.base_channels, cfg.levels);
        if (cfg.ablations.isdm) {
            for (int k = 1; k <= cfg.levels; ++k) {
                const std::int64_t c = static_cast<std::int64_t>(cfg.base_channels) << (k - 1);
                m.modulation.push_back(isdm::IsdmLevel::create(m.params, rng,
                                                               "isdm" + std::to_string(k), c, c,
                                                               cfg.ablations.imu, cfg.ablations.smu));
            }
            m.semantic = isdm::SemanticEncoder::create(m.params, "semantic", cfg.base_channels,
                                                       cfg.levels, /*seed=*/0);
        }
        m.head = rsmu::RsmuHead::create(m.params, rng, "rsmu", cfg.base_channels, cfg.scale,
                                        cfg.ablations.rsmu, cfg.ablations.fsi);
        m.perceptual = losses::FeatureExtractor::create(m.params, "perceptual");
        return m;
    }

    ForwardResult forward(nn::Binder& bind, const Tensor& x) const {
        Graph& g = bind.graph();
        require_rank(x, 4, "forward");
        if (x.dim(1) != 3) throw ShapeError("forward: need 3-channel input, got " + x.shape_str());
        if (x.dim(2) % 16 || x.dim(3) % 16)
            throw ShapeError("forward: spatial dims must be divisible by 16, got " + x.shape_str());

        ForwardResult out;
        out.u_ig = retinex::neighborhood_diff(x);
        Var x_leaf = g.constant(x);
        auto illum_res = illum.forward(bind, g.constant(out.u_ig));
        out.u_nl = illum_res.u_nl;
        out.v_nl = retinex::retinex_divide(g, x_leaf, out.u_nl);

        std::vector<Var> sem_feats;
        if (cfg.ablations.isdm) {
            isdm::SemanticSource src{isdm::SemanticSource::Mode::Builtin, &semantic, nullptr};
            sem_feats = isdm::semantic_features(bind, src, x_leaf);
        }
        auto hook = [&](int k, Var d) -> Var {
            if (!cfg.ablations.isdm) return d;
            const auto& lvl = modulation[static_cast<std::size_t>(k - 1)];
            Var i_f = illum_res.features[static_cast<std::size_t>(k - 1)];
            Var s_f = sem_feats.empty() ? Var{} : sem_feats[static_cast<std::size_t>(k - 1)];
            return lvl.forward(bind, i_f, s_f, d);
        };
        auto refl_feats = reflection.forward(bind, out.v_nl, hook);
        out.y_ns = head.forward(bind, refl_feats[0], out.v_nl);
        return out;
    }

    std::int64_t num_params(bool trainable_only = true) const {
        return params.num_elements(trainable_only);
    }
};

}  // namespace ultrabm::pipeline
