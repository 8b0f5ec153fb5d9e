// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "support.hpp"
#include "ultrabm/metrics.hpp"
#include "ultrabm/niqe.hpp"
#include "ultrabm/synthetic.hpp"

using namespace ultrabm;
using ubmtest::random_tensor;

#ifndef UBM_SOURCE_DIR
#define UBM_SOURCE_DIR "."
#endif

TEST(PsnrRmseTest, IdentityAndUniformError) {
    Rng rng(1);
    const Tensor ref = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
    EXPECT_EQ(metrics::psnr(ref, ref), 100.0);  // cap
    EXPECT_EQ(metrics::rmse(ref, ref), 0.0);

    Tensor y = ref.clone();
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += 0.1;
    EXPECT_NEAR(metrics::psnr(y, ref), 20.0, 1e-6);
    EXPECT_NEAR(metrics::rmse(y, ref), 0.1, 1e-9);
}

TEST(PsnrRmseTest, MatchesFlatLoopOracle) {
    Rng rng(2);
    const Tensor y = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
    const Tensor ref = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
    Scalar acc = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) acc += (y[i] - ref[i]) * (y[i] - ref[i]);
    acc /= static_cast<Scalar>(y.numel());
    EXPECT_NEAR(metrics::psnr(y, ref), 10.0 * std::log10(1.0 / acc), 1e-6);
    EXPECT_NEAR(metrics::rmse(y, ref), std::sqrt(acc), 1e-7);
}

TEST(PsnrRmseTest, LogIdentityCrossCheck) {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor y = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
        const Tensor ref = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
        const Scalar r = metrics::rmse(y, ref);
        ASSERT_GT(r, 0.0);
        EXPECT_NEAR(metrics::psnr(y, ref), 20.0 * std::log10(1.0 / r), 1e-6);
    }
}

TEST(SsimTest, SelfSimilarityIsOne) {
    Rng rng(4);
    const Tensor y = random_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
    EXPECT_NEAR(metrics::ssim(y, y), 1.0, 1e-12);
}

TEST(SsimTest, InvertedTexturedImageScoresBelowOne) {
    Rng rng(5);
    const Tensor ref = random_tensor(rng, {1, 3, 16, 16}, 0.1, 0.9);
    Tensor inv = ref.clone();
    for (std::int64_t i = 0; i < inv.numel(); ++i) inv[i] = 1.0 - inv[i];
    EXPECT_LT(metrics::ssim(inv, ref), 1.0);
}

TEST(SsimTest, TooSmallImageIsValidationError) {
    EXPECT_THROW(metrics::ssim(Tensor::zeros({1, 3, 8, 8}), Tensor::zeros({1, 3, 8, 8})), ValidationError);
}

TEST(SsimTest, MatchesSlidingWindowOracle) {
    // Checkerboard vs an image with the same mean: direct per-window oracle.
    const std::int64_t H = 14, W = 14;
    Tensor a({1, 1, H, W}), b({1, 1, H, W});
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            a.at(0, 0, y, x) = ((y + x) % 2) ? 0.8 : 0.2;
            b.at(0, 0, y, x) = 0.5;
        }
    // Oracle: explicit 2-D Gaussian window, all valid positions.
    std::vector<Scalar> win(121);
    {
        Scalar sum = 0;
        for (int i = 0; i < 11; ++i)
            for (int j = 0; j < 11; ++j) {
                const Scalar d = static_cast<Scalar>((i - 5) * (i - 5) + (j - 5) * (j - 5));
                win[static_cast<std::size_t>(i * 11 + j)] = std::exp(-d / (2 * 1.5 * 1.5));
                sum += win[static_cast<std::size_t>(i * 11 + j)];
            }
        for (auto& v : win) v /= sum;
    }
    Scalar expect = 0;
    std::int64_t count = 0;
    for (std::int64_t y = 0; y + 11 <= H; ++y)
        for (std::int64_t x = 0; x + 11 <= W; ++x) {
            Scalar ma = 0, mb = 0, va = 0, vb = 0, cab = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const Scalar w = win[static_cast<std::size_t>(i * 11 + j)];
                    ma += w * a.at(0, 0, y + i, x + j);
                    mb += w * b.at(0, 0, y + i, x + j);
                }
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const Scalar w = win[static_cast<std::size_t>(i * 11 + j)];
                    va += w * a.at(0, 0, y + i, x + j) * a.at(0, 0, y + i, x + j);
                    vb += w * b.at(0, 0, y + i, x + j) * b.at(0, 0, y + i, x + j);
                    cab += w * a.at(0, 0, y + i, x + j) * b.at(0, 0, y + i, x + j);
                }
            va -= ma * ma;
            vb -= mb * mb;
            cab -= ma * mb;
            const Scalar C1 = 1e-4, C2 = 9e-4;
            expect += ((2 * ma * mb + C1) * (2 * cab + C2)) /
                      ((ma * ma + mb * mb + C1) * (va + vb + C2));
            ++count;
        }
    expect /= static_cast<Scalar>(count);
    EXPECT_NEAR(metrics::ssim(a, b), expect, 1e-5);
}

TEST(LpipsTest, ZeroSymmetricAndOracle) {
    auto lp = metrics::Lpips::builtin();
    Rng rng(6);
    const Tensor y = random_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
    const Tensor ref = random_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
    EXPECT_EQ(lp.distance(y, y), 0.0);
    EXPECT_EQ(lp.distance(y, ref), lp.distance(ref, y));  // symmetric by construction
    EXPECT_FALSE(lp.calibrated);

    // Direct per-stage recomputation from the raw extractor features.
    Graph g;
    nn::Binder bind(g, lp.store, false);
    const auto fy = lp.extractor.forward(bind, g.leaf(y));
    const auto fr = lp.extractor.forward(bind, g.leaf(ref));
    Scalar expect = 0;
    for (std::size_t j = 0; j < fy.size(); ++j) {
        const Tensor& A = g.val(fy[j]);
        const Tensor& B = g.val(fr[j]);
        const std::int64_t C = A.dim(1), P = A.dim(2) * A.dim(3);
        Scalar stage = 0;
        for (std::int64_t p = 0; p < P; ++p) {
            Scalar na = 1e-10, nb = 1e-10;
            {
                Scalar sa = 0, sb = 0;
                for (std::int64_t c = 0; c < C; ++c) {
                    sa += A[A.idx4(0, c, 0, 0) + p] * A[A.idx4(0, c, 0, 0) + p];
                    sb += B[B.idx4(0, c, 0, 0) + p] * B[B.idx4(0, c, 0, 0) + p];
                }
                na += std::sqrt(sa);
                nb += std::sqrt(sb);
            }
            for (std::int64_t c = 0; c < C; ++c) {
                const Scalar d = A[A.idx4(0, c, 0, 0) + p] / na - B[B.idx4(0, c, 0, 0) + p] / nb;
                stage += d * d;
            }
        }
        expect += stage / static_cast<Scalar>(P);
    }
    EXPECT_NEAR(lp.distance(y, ref), expect, 1e-5);
}

TEST(LoeTest, ZeroOnIdentityAndMonotoneRemaps) {
    Rng rng(7);
    const Tensor x = random_tensor(rng, {1, 3, 20, 20}, 0.0, 1.0);
    EXPECT_EQ(metrics::loe(x, x), 0.0);
    // Strictly monotone gamma curve preserves every strict ordering.
    Tensor y = x.clone();
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = std::pow(y[i], 0.45);
    EXPECT_EQ(metrics::loe(y, x), 0.0);
}

TEST(LoeTest, InversionMatchesExhaustivePairOracle) {
    // Small tie-free image (<= 50x50, so no resampling) and y = 1 - x.
    Rng rng(8);
    const std::int64_t H = 12, W = 12;
    Tensor x({1, 3, H, W});
    std::vector<int> perm(static_cast<std::size_t>(H * W));
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
    for (std::int64_t i = 0; i < H * W; ++i)
        for (std::int64_t c = 0; c < 3; ++c)
            x[x.idx4(0, c, 0, 0) + i] = (static_cast<Scalar>(perm[static_cast<std::size_t>(i)]) + 1.0) /
                                        (static_cast<Scalar>(H * W) + 1.0);
    Tensor y = x.clone();
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = 1.0 - y[i];

    // Exhaustive O(n^2) oracle on the full-resolution lightness maps.
    std::vector<Scalar> lx(static_cast<std::size_t>(H * W)), ly(static_cast<std::size_t>(H * W));
    for (std::int64_t i = 0; i < H * W; ++i) {
        lx[static_cast<std::size_t>(i)] = x[x.idx4(0, 0, 0, 0) + i];
        ly[static_cast<std::size_t>(i)] = y[y.idx4(0, 0, 0, 0) + i];
    }
    std::int64_t mism = 0;
    for (std::int64_t p = 0; p < H * W; ++p)
        for (std::int64_t q = 0; q < H * W; ++q)
            if ((lx[static_cast<std::size_t>(p)] > lx[static_cast<std::size_t>(q)]) !=
                (ly[static_cast<std::size_t>(p)] > ly[static_cast<std::size_t>(q)]))
                ++mism;
    const Scalar expect = 1000.0 * static_cast<Scalar>(mism) / static_cast<Scalar>(H * W * H * W);
    EXPECT_NEAR(metrics::loe(y, x), expect, 1e-12);
    // With no ties, inversion flips all off-diagonal pairs.
    const Scalar n = static_cast<Scalar>(H * W);
    EXPECT_NEAR(expect, 1000.0 * (n * n - n) / (n * n), 1e-12);
}

TEST(NiqeTest, FixtureModelProperties) {
    const std::string model_path = std::string(UBM_SOURCE_DIR) + "/assets/niqe/synthetic_pristine.ubmt";
    const auto model = metrics::NiqeModel::load(model_path);
    EXPECT_EQ(model.patch_size, 32);

    const auto pair = image::make_synthetic_pair(77, 0.0, 2, {64, 64}, 0.0);
    const Tensor clean = pair.ref.data;
    const Scalar s1 = metrics::niqe(clean, model);
    const Scalar s2 = metrics::niqe(clean, model);
    EXPECT_EQ(s1, s2);  // deterministic
    EXPECT_GE(s1, 0.0);

    // Heavier noise strictly increases the score on the bundled fixture.
    Scalar prev = s1;
    for (Scalar sigma : {0.05, 0.1, 0.2}) {
        Tensor noisy = clean.clone();
        Rng nr(42);
        for (std::int64_t i = 0; i < noisy.numel(); ++i)
            noisy[i] = std::min(std::max(noisy[i] + nr.normal(0.0, sigma), 0.0), 1.0);
        const Scalar s = metrics::niqe(noisy, model);
        EXPECT_GT(s, prev);
        prev = s;
    }
}

TEST(NiqeTest, MissingModelFileIsConfigError) {
    EXPECT_THROW(metrics::NiqeModel::load("/nonexistent/model.ubmt"), IoError);
    // A tensor container without the required entries is a config error.
    TensorFile f;
    f.put("mu", Tensor::zeros({36}));
    const std::string p = (std::filesystem::temp_directory_path() / "bad_niqe.ubmt").string();
    f.save(p);
    EXPECT_THROW(metrics::NiqeModel::load(p), ConfigError);
}

TEST(ReportTest, AggregateEqualsRowMeans) {
    metrics::MetricReport rep;
    rep.scale = 2;
    for (int i = 0; i < 3; ++i) {
        metrics::MetricRow r;
        r.image = "img" + std::to_string(i);
        r.psnr = 20.0 + i;
        r.ssim = 0.5 + 0.1 * i;
        r.rmse = 0.1 * (i + 1);
        r.lpips = 0.2 * (i + 1);
        r.niqe = 3.0 + i;
        r.loe = 10.0 * i;
        rep.rows.push_back(r);
    }
    const auto m = rep.aggregate();
    EXPECT_NEAR(m.psnr, 21.0, 1e-9);
    EXPECT_NEAR(m.ssim, 0.6, 1e-9);
    EXPECT_NEAR(m.rmse, 0.2, 1e-9);
    EXPECT_NEAR(m.lpips, 0.4, 1e-9);
    EXPECT_NEAR(m.niqe, 4.0, 1e-9);
    EXPECT_NEAR(m.loe, 10.0, 1e-9);

    const auto dir = std::filesystem::temp_directory_path();
    rep.write_csv((dir / "rep.csv").string());
    rep.write_json((dir / "rep.json").string());
    std::ifstream is(dir / "rep.csv");
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header, "image,psnr,ssim,rmse,lpips,niqe,loe");
}
