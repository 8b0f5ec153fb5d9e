// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ultrabm/tensor.hpp"

namespace ultrabm {

// Plain-tensor separable bicubic resize (Keys kernel, a = -0.5) with
// kernel-width scaling when minifying, i.e. imresize-style antialiasing.
// No gradient support; data generation and metrics only.
namespace resize_detail {

inline Scalar keys(Scalar t) {
    constexpr Scalar a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
    if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
    return 0.0;
}

struct Taps1d {
    std::vector<std::int32_t> idx;
    std::vector<Scalar> w;
    int n = 0;
};

inline Taps1d make_taps(std::int64_t in_n, std::int64_t out_n) {
    const Scalar scale = static_cast<Scalar>(in_n) / static_cast<Scalar>(out_n);
    const Scalar kscale = std::max(scale, Scalar(1));  // widen kernel when minifying
    const int half = static_cast<int>(std::ceil(2.0 * kscale));
    Taps1d taps;
    taps.n = 2 * half;
    taps.idx.resize(static_cast<std::size_t>(out_n * taps.n));
    taps.w.resize(static_cast<std::size_t>(out_n * taps.n));
    for (std::int64_t o = 0; o < out_n; ++o) {
        const Scalar center = (static_cast<Scalar>(o) + 0.5) * scale - 0.5;
        const std::int64_t left = static_cast<std::int64_t>(std::floor(center)) - half + 1;
        Scalar sum = 0;
        for (int k = 0; k < taps.n; ++k) {
            const std::int64_t i = left + k;
            const Scalar w = keys((center - static_cast<Scalar>(i)) / kscale);
            taps.idx[static_cast<std::size_t>(o * taps.n + k)] =
                static_cast<std::int32_t>(std::min(std::max(i, std::int64_t(0)), in_n - 1));
            taps.w[static_cast<std::size_t>(o * taps.n + k)] = w;
            sum += w;
        }
        const Scalar inv = 1.0 / sum;
        for (int k = 0; k < taps.n; ++k) taps.w[static_cast<std::size_t>(o * taps.n + k)] *= inv;
    }
    return taps;
}

}  // namespace resize_detail

inline Tensor resize_bicubic(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    require_rank(x, 4, "resize_bicubic");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto th = resize_detail::make_taps(H, out_h);
    const auto tw = resize_detail::make_taps(W, out_w);
    Tensor tmp({B, C, out_h, W});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const Scalar* src = x.data() + x.idx4(b, c, 0, 0);
            Scalar* dst = tmp.data() + tmp.idx4(b, c, 0, 0);
            for (std::int64_t oy = 0; oy < out_h; ++oy)
                for (std::int64_t xx = 0; xx < W; ++xx) {
                    Scalar acc = 0;
                    for (int k = 0; k < th.n; ++k)
                        acc += th.w[static_cast<std::size_t>(oy * th.n + k)] *
                               src[th.idx[static_cast<std::size_t>(oy * th.n + k)] * W + xx];
                    dst[oy * W + xx] = acc;
                }
        }
    Tensor out({B, C, out_h, out_w});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const Scalar* src = tmp.data() + tmp.idx4(b, c, 0, 0);
            Scalar* dst = out.data() + out.idx4(b, c, 0, 0);
            for (std::int64_t oy = 0; oy < out_h; ++oy)
                for (std::int64_t ox = 0; ox < out_w; ++ox) {
                    Scalar acc = 0;
                    for (int k = 0; k < tw.n; ++k)
                        acc += tw.w[static_cast<std::size_t>(ox * tw.n + k)] *
                               src[oy * W + tw.idx[static_cast<std::size_t>(ox * tw.n + k)]];
                    dst[oy * out_w + ox] = acc;
                }
        }
    return out;
}

// Reflect padding (border not repeated) on H and W.
inline Tensor reflect_pad(const Tensor& x, std::int64_t top, std::int64_t bottom, std::int64_t left,
                          std::int64_t right) {
    require_rank(x, 4, "reflect_pad");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (top >= H || bottom >= H || left >= W || right >= W)
        throw ShapeError("reflect_pad: padding must be smaller than the image");
    auto mirror = [](std::int64_t i, std::int64_t n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };
    Tensor y({B, C, H + top + bottom, W + left + right});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t yy = 0; yy < H + top + bottom; ++yy) {
                const std::int64_t sy = mirror(yy - top, H);
                for (std::int64_t xx = 0; xx < W + left + right; ++xx)
                    y.at(b, c, yy, xx) = x.at(b, c, sy, mirror(xx - left, W));
            }
    return y;
}

inline Tensor crop(const Tensor& x, std::int64_t top, std::int64_t left, std::int64_t h, std::int64_t w) {
    require_rank(x, 4, "crop");
    if (top < 0 || left < 0 || top + h > x.dim(2) || left + w > x.dim(3))
        throw ShapeError("crop: window out of bounds");
    Tensor y({x.dim(0), x.dim(1), h, w});
    for (std::int64_t b = 0; b < x.dim(0); ++b)
        for (std::int64_t c = 0; c < x.dim(1); ++c)
            for (std::int64_t yy = 0; yy < h; ++yy)
                std::copy_n(x.data() + x.idx4(b, c, top + yy, left), w, y.data() + y.idx4(b, c, yy, 0));
    return y;
}

}  // namespace ultrabm
