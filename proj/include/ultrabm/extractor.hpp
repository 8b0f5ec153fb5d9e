// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ultrabm/nn.hpp"
#include "ultrabm/ops.hpp"
#include "ultrabm/tensor_file.hpp"

namespace ultrabm::losses {

// Frozen multi-stage conv feature extractor backing the perceptual loss
// and the LPIPS metric. Stage 1 runs at full resolution, stages 2..n
// halve it. The default is a small fixed-seed network; externally trained
// weights load from a tensor container with entries "stage<k>.w" /
// "stage<k>.b" (widths are inferred from the stored shapes, strides stay
// (1,2,2,2,2)).
struct FeatureExtractor {
    std::vector<nn::Conv2dLayer> stages;
    std::vector<std::int64_t> widths;

    static FeatureExtractor create(nn::ParamStore& ps, const std::string& name,
                                   std::vector<std::int64_t> widths = {8, 16, 32, 64, 64},
                                   std::uint64_t seed = 0) {
        Rng rng(seed);
        FeatureExtractor fe;
        fe.widths = widths;
        std::int64_t in_c = 3;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            fe.stages.push_back(nn::Conv2dLayer::create(ps, rng, name + ".stage" + std::to_string(k + 1),
                                                        in_c, widths[k], 3, k == 0 ? 1 : 2, 1,
                                                        nn::Init::HeNormal, true, /*trainable=*/false));
            in_c = widths[k];
        }
        return fe;
    }

    static FeatureExtractor from_file(nn::ParamStore& ps, const std::string& name, const TensorFile& f) {
        FeatureExtractor fe;
        std::int64_t in_c = 3;
        for (int k = 1;; ++k) {
            const std::string wk = "stage" + std::to_string(k) + ".w";
            const std::string bk = "stage" + std::to_string(k) + ".b";
            if (!f.has(wk)) break;
            const Tensor& w = f.get(wk);
            if (w.rank() != 4 || w.dim(1) != in_c)
                throw ValidationError("extractor weights: '" + wk + "' has shape " + w.shape_str() +
                                      ", expected input channels " + std::to_string(in_c));
            nn::Conv2dLayer l;
            l.spec.stride = k == 1 ? 1 : 2;
            l.spec.pad = static_cast<int>(w.dim(2)) / 2;
            l.w = ps.add(name + "." + wk, w.clone(), /*trainable=*/false);
            if (f.has(bk)) {
                const Tensor& b = f.get(bk);
                if (b.numel() != w.dim(0)) throw ValidationError("extractor weights: bias size mismatch at " + bk);
                l.b = ps.add(name + "." + bk, b.clone(), /*trainable=*/false);
            }
            fe.stages.push_back(l);
            fe.widths.push_back(w.dim(0));
            in_c = w.dim(0);
        }
        if (fe.stages.empty()) throw ValidationError("extractor weights: no 'stage1.w' entry found");
        return fe;
    }

    std::size_t stage_count() const { return stages.size(); }

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

}  // namespace ultrabm::losses
