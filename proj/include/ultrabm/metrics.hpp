// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ultrabm/extractor.hpp"
#include "ultrabm/image.hpp"
#include "ultrabm/tensor.hpp"
#include "ultrabm/tensor_file.hpp"

namespace ultrabm::metrics {

// ---------------------------------------------------------------------------
// Pixel metrics
// ---------------------------------------------------------------------------

inline Scalar mse(const Tensor& y, const Tensor& ref) {
    require_same_shape(y, ref, "mse");
    Scalar s = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        const Scalar d = y[i] - ref[i];
        s += d * d;
    }
    return s / static_cast<Scalar>(y.numel());
}

inline Scalar rmse(const Tensor& y, const Tensor& ref) { return std::sqrt(mse(y, ref)); }

// 10 log10(1 / MSE) on [0,1] data, capped at 100 dB for (near-)identical inputs.
inline Scalar psnr(const Tensor& y, const Tensor& ref) {
    const Scalar m = mse(y, ref);
    if (m <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / m));
}

// ---------------------------------------------------------------------------
// SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, L=1, valid mode)
// ---------------------------------------------------------------------------

namespace detail {

inline const std::vector<Scalar>& ssim_window() {
    static const std::vector<Scalar> w = [] {
        std::vector<Scalar> v(11);
        Scalar sum = 0;
        for (int i = 0; i < 11; ++i) {
            const Scalar d = static_cast<Scalar>(i - 5);
            v[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += v[static_cast<std::size_t>(i)];
        }
        for (auto& x : v) x /= sum;
        return v;
    }();
    return w;
}

// Separable valid-mode filtering of one (H,W) plane with the SSIM window.
inline std::vector<Scalar> ssim_filter(const Scalar* img, std::int64_t H, std::int64_t W) {
    const auto& win = ssim_window();
    const std::int64_t Ho = H - 10, Wo = W - 10;
    std::vector<Scalar> tmp(static_cast<std::size_t>(Ho * W)), out(static_cast<std::size_t>(Ho * Wo));
    for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            Scalar s = 0;
            for (int k = 0; k < 11; ++k) s += win[static_cast<std::size_t>(k)] * img[(y + k) * W + x];
            tmp[static_cast<std::size_t>(y * W + x)] = s;
        }
    for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t x = 0; x < Wo; ++x) {
            Scalar s = 0;
            for (int k = 0; k < 11; ++k) s += win[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>(y * W + x + k)];
            out[static_cast<std::size_t>(y * Wo + x)] = s;
        }
    return out;
}

}  // namespace detail

inline Scalar ssim(const Tensor& y, const Tensor& ref) {
    require_same_shape(y, ref, "ssim");
    require_rank(y, 4, "ssim");
    const std::int64_t H = y.dim(2), W = y.dim(3);
    if (H < 11 || W < 11) throw ValidationError("ssim: image smaller than the 11x11 window");
    const Tensor gy = y.dim(1) == 3 ? image::rgb_to_gray(y) : y;
    const Tensor gr = ref.dim(1) == 3 ? image::rgb_to_gray(ref) : ref;
    constexpr Scalar C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;

    Scalar total = 0;
    std::int64_t count = 0;
    for (std::int64_t b = 0; b < y.dim(0); ++b) {
        const Scalar* a = gy.data() + gy.idx4(b, 0, 0, 0);
        const Scalar* r = gr.data() + gr.idx4(b, 0, 0, 0);
        const std::int64_t n = H * W;
        std::vector<Scalar> a2(static_cast<std::size_t>(n)), r2(static_cast<std::size_t>(n)),
            ar(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            a2[static_cast<std::size_t>(i)] = a[i] * a[i];
            r2[static_cast<std::size_t>(i)] = r[i] * r[i];
            ar[static_cast<std::size_t>(i)] = a[i] * r[i];
        }
        const auto mu_a = detail::ssim_filter(a, H, W);
        const auto mu_r = detail::ssim_filter(r, H, W);
        const auto m_a2 = detail::ssim_filter(a2.data(), H, W);
        const auto m_r2 = detail::ssim_filter(r2.data(), H, W);
        const auto m_ar = detail::ssim_filter(ar.data(), H, W);
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const Scalar ma = mu_a[i], mr = mu_r[i];
            const Scalar va = m_a2[i] - ma * ma;
            const Scalar vr = m_r2[i] - mr * mr;
            const Scalar cov = m_ar[i] - ma * mr;
            total += ((2 * ma * mr + C1) * (2 * cov + C2)) / ((ma * ma + mr * mr + C1) * (va + vr + C2));
            ++count;
        }
    }
    return total / static_cast<Scalar>(count);
}

// ---------------------------------------------------------------------------
// LPIPS (stage-normalized deep-feature distance; uncalibrated by default)
// ---------------------------------------------------------------------------

struct Lpips {
    nn::ParamStore store;
    losses::FeatureExtractor extractor;
    std::vector<Tensor> channel_weights;  // one (C_j) vector per stage
    bool calibrated = false;

    static Lpips builtin() {
        Lpips m;
        m.extractor = losses::FeatureExtractor::create(m.store, "lpips");
        for (auto c : m.extractor.widths) m.channel_weights.push_back(Tensor::full({c}, 1.0));
        return m;
    }

    // Extractor weights from a tensor container, optional per-stage channel
    // weights ("w1".."w5") from a second container.
    static Lpips from_files(const std::string& extractor_path, const std::string& weights_path = "") {
        Lpips m;
        m.extractor = losses::FeatureExtractor::from_file(m.store, "lpips", TensorFile::load(extractor_path));
        for (auto c : m.extractor.widths) m.channel_weights.push_back(Tensor::full({c}, 1.0));
        if (!weights_path.empty()) {
            const TensorFile wf = TensorFile::load(weights_path);
            for (std::size_t j = 0; j < m.channel_weights.size(); ++j) {
                const std::string key = "w" + std::to_string(j + 1);
                if (!wf.has(key)) throw ValidationError("lpips weights: missing entry '" + key + "'");
                const Tensor& w = wf.get(key);
                if (w.numel() != m.extractor.widths[j])
                    throw ValidationError("lpips weights: '" + key + "' size mismatch");
                m.channel_weights[j] = w.clone();
            }
        }
        m.calibrated = !weights_path.empty();
        return m;
    }

    Scalar distance(const Tensor& y, const Tensor& ref) {
        require_same_shape(y, ref, "lpips");
        Graph g;
        nn::Binder bind(g, store, false);
        const auto fy = extractor.forward(bind, g.leaf(y));
        const auto fr = extractor.forward(bind, g.leaf(ref));
        Scalar total = 0;
        for (std::size_t j = 0; j < fy.size(); ++j) {
            const Tensor& a = g.val(fy[j]);
            const Tensor& b = g.val(fr[j]);
            const Tensor& w = channel_weights[j];
            const std::int64_t B = a.dim(0), C = a.dim(1), P = a.dim(2) * a.dim(3);
            Scalar stage = 0;
            for (std::int64_t bb = 0; bb < B; ++bb)
                for (std::int64_t p = 0; p < P; ++p) {
                    Scalar na = 0, nb = 0;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const Scalar va = a[a.idx4(bb, c, 0, 0) + p];
                        const Scalar vb = b[b.idx4(bb, c, 0, 0) + p];
                        na += va * va;
                        nb += vb * vb;
                    }
                    na = std::sqrt(na) + 1e-10;
                    nb = std::sqrt(nb) + 1e-10;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const Scalar d = a[a.idx4(bb, c, 0, 0) + p] / na - b[b.idx4(bb, c, 0, 0) + p] / nb;
                        stage += w[c] * d * d;
                    }
                }
            total += stage / static_cast<Scalar>(B * P);
        }
        return total;
    }
};

// ---------------------------------------------------------------------------
// LOE (lightness order error)
// ---------------------------------------------------------------------------

// Fraction of sampled pixel pairs whose strict lightness ordering the
// enhancement inverted, scaled by 1000. Both images are sampled onto a
// common grid of at most 50x50 positions.
inline Scalar loe(const Tensor& enhanced, const Tensor& original) {
    require_rank(enhanced, 4, "loe");
    require_rank(original, 4, "loe");
    if (enhanced.dim(0) != 1 || original.dim(0) != 1) throw ShapeError("loe: expects single images");
    auto lightness_grid = [](const Tensor& img, std::int64_t gh, std::int64_t gw) {
        const std::int64_t H = img.dim(2), W = img.dim(3), C = img.dim(1);
        std::vector<Scalar> L(static_cast<std::size_t>(gh * gw));
        for (std::int64_t i = 0; i < gh; ++i)
            for (std::int64_t j = 0; j < gw; ++j) {
                const std::int64_t y = (2 * i + 1) * H / (2 * gh);
                const std::int64_t x = (2 * j + 1) * W / (2 * gw);
                Scalar m = img.at(0, 0, y, x);
                for (std::int64_t c = 1; c < C; ++c) m = std::max(m, img.at(0, c, y, x));
                L[static_cast<std::size_t>(i * gw + j)] = m;
            }
        return L;
    };
    const std::int64_t gh = std::min<std::int64_t>({50, enhanced.dim(2), original.dim(2)});
    const std::int64_t gw = std::min<std::int64_t>({50, enhanced.dim(3), original.dim(3)});
    const auto le = lightness_grid(enhanced, gh, gw);
    const auto lo = lightness_grid(original, gh, gw);
    const std::int64_t n = gh * gw;
    std::int64_t mismatches = 0;
    for (std::int64_t p = 0; p < n; ++p)
        for (std::int64_t q = 0; q < n; ++q) {
            const bool a = lo[static_cast<std::size_t>(p)] > lo[static_cast<std::size_t>(q)];
            const bool b = le[static_cast<std::size_t>(p)] > le[static_cast<std::size_t>(q)];
            if (a != b) ++mismatches;
        }
    return 1000.0 * static_cast<Scalar>(mismatches) / static_cast<Scalar>(n * n);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string image;
    Scalar psnr = 0, ssim = 0, rmse = 0, lpips = 0, niqe = 0, loe = 0;
};

struct MetricReport {
    int scale = 0;
    bool lpips_calibrated = false;
    bool has_niqe = false;
    std::vector<MetricRow> rows;

    MetricRow aggregate() const {
        MetricRow m;
        m.image = "mean";
        if (rows.empty()) return m;
        for (const auto& r : rows) {
            m.psnr += r.psnr;
            m.ssim += r.ssim;
            m.rmse += r.rmse;
            m.lpips += r.lpips;
            m.niqe += r.niqe;
            m.loe += r.loe;
        }
        const Scalar n = static_cast<Scalar>(rows.size());
        m.psnr /= n;
        m.ssim /= n;
        m.rmse /= n;
        m.lpips /= n;
        m.niqe /= n;
        m.loe /= n;
        return m;
    }

    // Column order: image,psnr,ssim,rmse,lpips,niqe,loe.
    void write_csv(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("report: cannot write " + path);
        os << "image,psnr,ssim,rmse,lpips,niqe,loe\n";
        os.precision(17);
        for (const auto& r : rows)
            os << r.image << "," << r.psnr << "," << r.ssim << "," << r.rmse << "," << r.lpips << ","
               << r.niqe << "," << r.loe << "\n";
    }

    void write_json(const std::string& path) const {
        const MetricRow m = aggregate();
        nlohmann::json doc{{"scale", scale},
                           {"count", rows.size()},
                           {"lpips_calibrated", lpips_calibrated},
                           {"niqe_available", has_niqe},
                           {"mean",
                            {{"psnr", m.psnr},
                             {"ssim", m.ssim},
                             {"rmse", m.rmse},
                             {"lpips", m.lpips},
                             {"niqe", m.niqe},
                             {"loe", m.loe}}}};
        std::ofstream os(path);
        if (!os) throw IoError("report: cannot write " + path);
        os << doc.dump(2) << "\n";
    }
};

}  // namespace ultrabm::metrics
