// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <utility>

#include "ultrabm/image.hpp"
#include "ultrabm/resize.hpp"
#include "ultrabm/rng.hpp"
#include "ultrabm/tensor.hpp"

namespace ultrabm::image {

// Exposure-simulating paired-data generator. The reference image is a
// seeded procedural scene (smooth color fields plus textured patches);
// the low-light input is its bicubic downsample under a 2^ev gain with
// additive Gaussian noise, clamped to [0,1]. A pure function of its
// arguments: identical inputs give bit-identical pairs.
struct SyntheticPair {
    ImageTensor low;   // (1,3,H,W)
    ImageTensor ref;   // (1,3,sH,sW)
};

namespace detail {

inline Tensor procedural_reference(std::uint64_t seed, std::int64_t h, std::int64_t w) {
    Rng rng(seed);
    // Smooth base: random coarse grid, bicubic-blown to full size.
    Tensor grid({1, 3, 4, 4});
    for (std::int64_t i = 0; i < grid.numel(); ++i) grid[i] = rng.uniform(0.20, 0.80);
    Tensor img = resize_bicubic(grid, h, w);

    // Textured patches: sinusoidal gratings in random rectangles.
    const int patches = 6;
    for (int p = 0; p < patches; ++p) {
        const std::int64_t ph = std::max<std::int64_t>(h / 8, rng.uniform_int(h / 2) + 1);
        const std::int64_t pw = std::max<std::int64_t>(w / 8, rng.uniform_int(w / 2) + 1);
        const std::int64_t py = rng.uniform_int(std::max<std::int64_t>(h - ph, 1));
        const std::int64_t px = rng.uniform_int(std::max<std::int64_t>(w - pw, 1));
        const Scalar fy = rng.uniform(0.3, 1.6);
        const Scalar fx = rng.uniform(0.3, 1.6);
        const Scalar phase = rng.uniform(0.0, 6.28318530717958648);
        const Scalar amp = rng.uniform(0.05, 0.18);
        Scalar cw[3] = {rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)};
        for (std::int64_t y = 0; y < ph; ++y)
            for (std::int64_t x = 0; x < pw; ++x) {
                const Scalar v = amp * std::sin(fy * static_cast<Scalar>(y) + fx * static_cast<Scalar>(x) + phase);
                for (int c = 0; c < 3; ++c) img.at(0, c, py + y, px + x) += cw[c] * v;
            }
    }
    // Soft squash into (0.02, 0.98) so references avoid hard saturation.
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        const Scalar v = img[i];
        img[i] = 0.02 + 0.96 / (1.0 + std::exp(-4.0 * (v - 0.5)));
    }
    return img;
}

}  // namespace detail

inline Tensor bicubic_downsample(const Tensor& x, int scale) {
    require_rank(x, 4, "bicubic_downsample");
    if (x.dim(2) % scale || x.dim(3) % scale) throw ShapeError("bicubic_downsample: size not divisible by scale");
    return resize_bicubic(x, x.dim(2) / scale, x.dim(3) / scale);
}

inline SyntheticPair make_synthetic_pair(std::uint64_t seed, Scalar ev, int scale,
                                         std::pair<std::int64_t, std::int64_t> low_size,
                                         Scalar noise_sigma = 0.01) {
    const auto [h, w] = low_size;
    if (ev < -5.0 || ev > 0.0) throw ValidationError("make_synthetic_pair: ev must be in [-5, 0]");
    if (scale != 2 && scale != 4) throw ValidationError("make_synthetic_pair: scale must be 2 or 4");
    const std::int64_t div = 8 * scale;
    if (h % div || w % div)
        throw ShapeError("make_synthetic_pair: size must be divisible by " + std::to_string(div));

    SyntheticPair pair;
    pair.ref.data = detail::procedural_reference(seed, h * scale, w * scale);

    Tensor low = bicubic_downsample(pair.ref.data, scale);
    const Scalar gain = std::exp2(ev);
    // Noise stream mixes in ev bits so the full argument tuple seeds it.
    std::uint64_t ev_bits;
    static_assert(sizeof(ev_bits) == sizeof(ev));
    std::memcpy(&ev_bits, &ev, sizeof(ev));
    Rng noise(fnv1a64(&ev_bits, sizeof(ev_bits), seed ^ 0x6a09e667f3bcc909ull));
    for (std::int64_t i = 0; i < low.numel(); ++i) {
        Scalar v = low[i] * gain;
        if (noise_sigma > 0.0) v += noise.normal(0.0, noise_sigma);
        low[i] = std::min(std::max(v, Scalar(0)), Scalar(1));
    }
    pair.low.data = std::move(low);
    return pair;
}

}  // namespace ultrabm::image
