// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <optional>
#include <string>

#include "ultrabm/metrics.hpp"
#include "ultrabm/model.hpp"
#include "ultrabm/niqe.hpp"
#include "ultrabm/resize.hpp"
#include "ultrabm/train.hpp"

namespace ultrabm::pipeline {

// Reflect-pads to the next multiple of 16 (bottom/right), runs the model,
// and crops the output back to scale * the original size.
inline Tensor infer_image(const Model& m, const Tensor& low) {
    require_rank(low, 4, "infer");
    const std::int64_t H = low.dim(2), W = low.dim(3);
    const std::int64_t pb = (16 - H % 16) % 16;
    const std::int64_t pr = (16 - W % 16) % 16;
    Tensor padded = (pb || pr) ? reflect_pad(low, 0, pb, 0, pr) : low;
    Graph g;
    nn::Binder bind(g, const_cast<nn::ParamStore&>(m.params), /*train_mode=*/false);
    auto fwd = m.forward(bind, padded);
    const Tensor& y = g.val(fwd.y_ns);
    if (pb || pr) return crop(y, 0, 0, H * m.cfg.scale, W * m.cfg.scale);
    return y.clone();
}

struct EvalOptions {
    std::optional<metrics::NiqeModel> niqe_model;
    metrics::Lpips* lpips = nullptr;  // defaults to the builtin backbone
};

// Runs the model over every manifest pair and scores all metrics.
inline metrics::MetricReport evaluate(const Model& m, const image::PairManifest& manifest,
                                      const EvalOptions& opts = {}) {
    if (!manifest.entries.empty() && manifest.scale() != m.cfg.scale)
        throw ValidationError("evaluate: manifest scale " + std::to_string(manifest.scale()) +
                              " does not match model scale " + std::to_string(m.cfg.scale));
    metrics::Lpips local_lpips = opts.lpips ? metrics::Lpips() : metrics::Lpips::builtin();
    metrics::Lpips& lp = opts.lpips ? *opts.lpips : local_lpips;

    metrics::MetricReport report;
    report.scale = m.cfg.scale;
    report.lpips_calibrated = lp.calibrated;
    report.has_niqe = opts.niqe_model.has_value();
    for (const auto& entry : manifest.entries) {
        const Tensor low = image::load_image(entry.low_path).data;
        const Tensor ref = image::load_image(entry.ref_path).data;
        const Tensor y = infer_image(m, low);
        require_same_shape(y, ref, "evaluate");
        metrics::MetricRow row;
        row.image = std::filesystem::path(entry.low_path).filename().string();
        row.psnr = metrics::psnr(y, ref);
        row.ssim = metrics::ssim(y, ref);
        row.rmse = metrics::rmse(y, ref);
        row.lpips = lp.distance(y, ref);
        row.loe = metrics::loe(y, low);
        row.niqe = opts.niqe_model ? metrics::niqe(y, *opts.niqe_model)
                                   : std::numeric_limits<Scalar>::quiet_NaN();
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace ultrabm::pipeline
