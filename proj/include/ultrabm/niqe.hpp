// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ultrabm/image.hpp"
#include "ultrabm/resize.hpp"
#include "ultrabm/tensor.hpp"
#include "ultrabm/tensor_file.hpp"

namespace ultrabm::metrics {

// NIQE: distance between the multivariate-Gaussian fit of an image's
// natural-scene-statistics features and a pristine model. The pristine
// model (mean, covariance, patch size) is an input artifact loaded from a
// tensor container with entries "mu", "cov", "patch_size"; fitting happens
// offline (see the fit-niqe CLI command).
//
// Features per patch: GGD (shape, variance) of the MSCN coefficients plus
// AGGD (shape, mean, left/right variance) of four neighbor products,
// computed at two scales: 18 + 18 = 36.

namespace niqe_detail {

constexpr int kFeatureDim = 36;

inline const std::vector<std::array<Scalar, 2>>& gamma_lut() {
    // (gamma, r(gamma)) pairs with r = Gamma(1/g)Gamma(3/g)/Gamma(2/g)^2.
    static const std::vector<std::array<Scalar, 2>> lut = [] {
        std::vector<std::array<Scalar, 2>> v;
        for (Scalar gam = 0.2; gam <= 10.0 + 1e-12; gam += 0.001) {
            const Scalar r = std::tgamma(1.0 / gam) * std::tgamma(3.0 / gam) /
                             (std::tgamma(2.0 / gam) * std::tgamma(2.0 / gam));
            v.push_back({gam, r});
        }
        return v;
    }();
    return lut;
}

inline Scalar ggd_shape_from_ratio(Scalar rhat) {
    const auto& lut = gamma_lut();
    Scalar best = lut.front()[0];
    Scalar best_err = std::abs(lut.front()[1] - rhat);
    for (const auto& e : lut) {
        const Scalar err = std::abs(e[1] - rhat);
        if (err < best_err) {
            best_err = err;
            best = e[0];
        }
    }
    return best;
}

// 7x7 Gaussian window, sigma = 7/6, normalized.
inline const std::vector<Scalar>& mscn_window() {
    static const std::vector<Scalar> w = [] {
        std::vector<Scalar> v(49);
        const Scalar s2 = (7.0 / 6.0) * (7.0 / 6.0);
        Scalar sum = 0;
        for (int y = 0; y < 7; ++y)
            for (int x = 0; x < 7; ++x) {
                const Scalar d = static_cast<Scalar>((y - 3) * (y - 3) + (x - 3) * (x - 3));
                v[static_cast<std::size_t>(y * 7 + x)] = std::exp(-d / (2.0 * s2));
                sum += v[static_cast<std::size_t>(y * 7 + x)];
            }
        for (auto& x : v) x /= sum;
        return v;
    }();
    return w;
}

struct MscnField {
    std::vector<Scalar> mscn;
    std::vector<Scalar> sigma;
    std::int64_t h = 0, w = 0;
};

inline MscnField compute_mscn(const std::vector<Scalar>& img, std::int64_t H, std::int64_t W) {
    const auto& win = mscn_window();
    auto filt = [&](const std::vector<Scalar>& src) {
        std::vector<Scalar> out(static_cast<std::size_t>(H * W));
        auto mirror = [](std::int64_t i, std::int64_t n) {
            if (i < 0) return -i;
            if (i >= n) return 2 * n - 2 - i;
            return i;
        };
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                Scalar s = 0;
                for (int ky = 0; ky < 7; ++ky)
                    for (int kx = 0; kx < 7; ++kx)
                        s += win[static_cast<std::size_t>(ky * 7 + kx)] *
                             src[static_cast<std::size_t>(mirror(y + ky - 3, H) * W + mirror(x + kx - 3, W))];
                out[static_cast<std::size_t>(y * W + x)] = s;
            }
        return out;
    };
    std::vector<Scalar> sq(static_cast<std::size_t>(H * W));
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = img[i] * img[i];
    const auto mu = filt(img);
    const auto musq = filt(sq);
    MscnField f;
    f.h = H;
    f.w = W;
    f.mscn.resize(static_cast<std::size_t>(H * W));
    f.sigma.resize(static_cast<std::size_t>(H * W));
    for (std::size_t i = 0; i < f.mscn.size(); ++i) {
        const Scalar var = std::max(musq[i] - mu[i] * mu[i], Scalar(0));
        f.sigma[i] = std::sqrt(var);
        f.mscn[i] = (img[i] - mu[i]) / (f.sigma[i] + 1.0);
    }
    return f;
}

// GGD moment-matching fit: returns (shape, variance).
inline std::array<Scalar, 2> fit_ggd(const std::vector<Scalar>& x) {
    Scalar m_abs = 0, m_sq = 0;
    for (Scalar v : x) {
        m_abs += std::abs(v);
        m_sq += v * v;
    }
    m_abs /= static_cast<Scalar>(x.size());
    m_sq /= static_cast<Scalar>(x.size());
    const Scalar rhat = m_sq / std::max(m_abs * m_abs, Scalar(1e-12));
    return {ggd_shape_from_ratio(rhat), m_sq};
}

// AGGD fit: returns (shape alpha, mean eta, left variance, right variance).
inline std::array<Scalar, 4> fit_aggd(const std::vector<Scalar>& x) {
    Scalar sl = 0, sr = 0, m_abs = 0, m_sq = 0;
    std::int64_t nl = 0, nr = 0;
    for (Scalar v : x) {
        if (v < 0) {
            sl += v * v;
            ++nl;
        } else if (v > 0) {
            sr += v * v;
            ++nr;
        }
        m_abs += std::abs(v);
        m_sq += v * v;
    }
    const Scalar n = static_cast<Scalar>(x.size());
    m_abs /= n;
    m_sq /= n;
    const Scalar sigma_l = std::sqrt(nl > 0 ? sl / static_cast<Scalar>(nl) : Scalar(0));
    const Scalar sigma_r = std::sqrt(nr > 0 ? sr / static_cast<Scalar>(nr) : Scalar(0));
    const Scalar gh = sigma_l / std::max(sigma_r, Scalar(1e-12));
    const Scalar rhat = (m_abs * m_abs) / std::max(m_sq, Scalar(1e-12));
    const Scalar rhat_norm =
        rhat * (gh * gh * gh + 1.0) * (gh + 1.0) / std::max((gh * gh + 1.0) * (gh * gh + 1.0), Scalar(1e-12));
    // Match Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)) == 1/r(a) against rhat_norm.
    const auto& lut = gamma_lut();
    Scalar alpha = lut.front()[0];
    Scalar best_err = 1e300;
    for (const auto& e : lut) {
        const Scalar err = std::abs(1.0 / e[1] - rhat_norm);
        if (err < best_err) {
            best_err = err;
            alpha = e[0];
        }
    }
    const Scalar g1 = std::tgamma(1.0 / alpha), g2 = std::tgamma(2.0 / alpha), g3 = std::tgamma(3.0 / alpha);
    const Scalar eta = (sigma_r - sigma_l) * (g2 / g1) * std::sqrt(g1 / g3);
    return {alpha, eta, sigma_l * sigma_l, sigma_r * sigma_r};
}

// 18 features from one MSCN field restricted to a patch window.
inline void patch_features(const MscnField& f, std::int64_t y0, std::int64_t x0, std::int64_t ph,
                           std::int64_t pw, Scalar* out) {
    std::vector<Scalar> m(static_cast<std::size_t>(ph * pw));
    for (std::int64_t y = 0; y < ph; ++y)
        for (std::int64_t x = 0; x < pw; ++x)
            m[static_cast<std::size_t>(y * pw + x)] = f.mscn[static_cast<std::size_t>((y0 + y) * f.w + x0 + x)];
    const auto ggd = fit_ggd(m);
    out[0] = ggd[0];
    out[1] = ggd[1];
    const std::array<std::array<std::int64_t, 2>, 4> shifts{{{0, 1}, {1, 0}, {1, 1}, {1, -1}}};
    int idx = 2;
    for (const auto& sh : shifts) {
        std::vector<Scalar> prod;
        prod.reserve(static_cast<std::size_t>(ph * pw));
        for (std::int64_t y = 0; y < ph; ++y)
            for (std::int64_t x = 0; x < pw; ++x) {
                const std::int64_t yy = y + sh[0], xx = x + sh[1];
                if (yy < 0 || yy >= ph || xx < 0 || xx >= pw) continue;
                prod.push_back(m[static_cast<std::size_t>(y * pw + x)] *
                               m[static_cast<std::size_t>(yy * pw + xx)]);
            }
        const auto aggd = fit_aggd(prod);
        out[idx++] = aggd[0];
        out[idx++] = aggd[1];
        out[idx++] = aggd[2];
        out[idx++] = aggd[3];
    }
}

inline std::vector<Scalar> plane_of(const Tensor& img) {
    const Tensor gray = img.dim(1) == 3 ? image::rgb_to_gray(img) : img;
    std::vector<Scalar> p(static_cast<std::size_t>(gray.dim(2) * gray.dim(3)));
    std::copy_n(gray.data(), p.size(), p.begin());
    return p;
}

}  // namespace niqe_detail

// One 36-dim feature vector per patch; optionally returns per-patch
// sharpness (mean sigma at full scale) for pristine-model selection.
inline std::vector<std::array<Scalar, 36>> niqe_patch_features(const Tensor& img, int patch_size,
                                                               std::vector<Scalar>* sharpness = nullptr) {
    require_rank(img, 4, "niqe");
    if (img.dim(0) != 1) throw ShapeError("niqe: expects a single image");
    const std::int64_t H = img.dim(2), W = img.dim(3);
    const int p = patch_size;
    if (p < 16 || p % 2) throw ValidationError("niqe: patch size must be even and >= 16");
    if (H < p || W < p)
        throw ValidationError("niqe: image " + img.shape_str() + " smaller than patch size " +
                              std::to_string(p));
    auto full = niqe_detail::plane_of(img);
    const auto f1 = niqe_detail::compute_mscn(full, H, W);
    const Tensor half_img = resize_bicubic(img, std::max<std::int64_t>(H / 2, 8), std::max<std::int64_t>(W / 2, 8));
    auto half = niqe_detail::plane_of(half_img);
    const auto f2 = niqe_detail::compute_mscn(half, half_img.dim(2), half_img.dim(3));

    const std::int64_t ny = H / p, nx = W / p;
    std::vector<std::array<Scalar, 36>> feats;
    for (std::int64_t by = 0; by < ny; ++by)
        for (std::int64_t bx = 0; bx < nx; ++bx) {
            std::array<Scalar, 36> f{};
            niqe_detail::patch_features(f1, by * p, bx * p, p, p, f.data());
            const std::int64_t hp = p / 2;
            const std::int64_t y0 = std::min(by * hp, f2.h - hp);
            const std::int64_t x0 = std::min(bx * hp, f2.w - hp);
            niqe_detail::patch_features(f2, y0, x0, hp, hp, f.data() + 18);
            feats.push_back(f);
            if (sharpness) {
                Scalar s = 0;
                for (std::int64_t y = 0; y < p; ++y)
                    for (std::int64_t x = 0; x < p; ++x)
                        s += f1.sigma[static_cast<std::size_t>((by * p + y) * W + bx * p + x)];
                sharpness->push_back(s / static_cast<Scalar>(p * p));
            }
        }
    return feats;
}

struct NiqeModel {
    Tensor mu;   // (36)
    Tensor cov;  // (36,36)
    int patch_size = 32;

    void save(const std::string& path) const {
        TensorFile f;
        f.put("mu", mu);
        f.put("cov", cov);
        f.put("patch_size", Tensor::scalar(static_cast<Scalar>(patch_size)));
        f.save(path);
    }

    static NiqeModel load(const std::string& path) {
        const TensorFile f = TensorFile::load(path);
        for (const char* k : {"mu", "cov", "patch_size"})
            if (!f.has(k)) throw ConfigError("niqe model: missing entry '" + std::string(k) + "' in " + path);
        NiqeModel m;
        m.mu = f.get("mu").clone();
        m.cov = f.get("cov").clone();
        m.patch_size = static_cast<int>(f.get("patch_size")[0]);
        if (m.mu.numel() != 36 || m.cov.rank() != 2 || m.cov.dim(0) != 36 || m.cov.dim(1) != 36)
            throw ConfigError("niqe model: malformed mu/cov in " + path);
        return m;
    }
};

// Fits the pristine MVG over the sharpest patches of a set of images
// (sharpness > 0.75 max per image, the conventional selection rule).
inline NiqeModel fit_niqe_model(const std::vector<Tensor>& images, int patch_size) {
    std::vector<std::array<Scalar, 36>> all;
    for (const auto& img : images) {
        std::vector<Scalar> sharp;
        auto feats = niqe_patch_features(img, patch_size, &sharp);
        Scalar smax = 0;
        for (Scalar s : sharp) smax = std::max(smax, s);
        for (std::size_t i = 0; i < feats.size(); ++i)
            if (sharp[i] > 0.75 * smax) all.push_back(feats[i]);
    }
    if (all.size() < 40) throw ValidationError("niqe fit: too few selected patches (" +
                                               std::to_string(all.size()) + "), need >= 40");
    NiqeModel m;
    m.patch_size = patch_size;
    m.mu = Tensor::zeros({36});
    m.cov = Tensor::zeros({36, 36});
    const Scalar n = static_cast<Scalar>(all.size());
    for (const auto& f : all)
        for (int i = 0; i < 36; ++i) m.mu[i] += f[static_cast<std::size_t>(i)] / n;
    for (const auto& f : all)
        for (int i = 0; i < 36; ++i)
            for (int j = 0; j < 36; ++j)
                m.cov[i * 36 + j] += (f[static_cast<std::size_t>(i)] - m.mu[i]) *
                                     (f[static_cast<std::size_t>(j)] - m.mu[j]) / (n - 1.0);
    return m;
}

// Mahalanobis-style NIQE score of one image against a pristine model.
inline Scalar niqe(const Tensor& img, const NiqeModel& model) {
    const auto feats = niqe_patch_features(img, model.patch_size);
    const std::int64_t n = static_cast<std::int64_t>(feats.size());
    Eigen::VectorXd mu2 = Eigen::VectorXd::Zero(36);
    for (const auto& f : feats)
        for (int i = 0; i < 36; ++i) mu2[i] += f[static_cast<std::size_t>(i)] / static_cast<Scalar>(n);
    Eigen::MatrixXd cov2 = Eigen::MatrixXd::Zero(36, 36);
    if (n > 1) {
        for (const auto& f : feats) {
            Eigen::VectorXd d(36);
            for (int i = 0; i < 36; ++i) d[i] = f[static_cast<std::size_t>(i)] - mu2[i];
            cov2 += d * d.transpose() / static_cast<Scalar>(n - 1);
        }
    }
    Eigen::VectorXd mu1(36);
    Eigen::MatrixXd cov1(36, 36);
    for (int i = 0; i < 36; ++i) {
        mu1[i] = model.mu[i];
        for (int j = 0; j < 36; ++j) cov1(i, j) = model.cov[i * 36 + j];
    }
    const Eigen::MatrixXd avg = 0.5 * (cov1 + cov2);
    // Pseudo-inverse of the PSD average covariance.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(avg);
    const auto& evals = es.eigenvalues();
    const Scalar tol = 1e-10 * std::max(evals.cwiseAbs().maxCoeff(), Scalar(1e-30));
    Eigen::VectorXd inv_evals(36);
    for (int i = 0; i < 36; ++i) inv_evals[i] = evals[i] > tol ? 1.0 / evals[i] : 0.0;
    const Eigen::MatrixXd pinv =
        es.eigenvectors() * inv_evals.asDiagonal() * es.eigenvectors().transpose();
    const Eigen::VectorXd d = mu1 - mu2;
    const Scalar q = d.dot(pinv * d);
    return std::sqrt(std::max(q, Scalar(0)));
}

}  // namespace ultrabm::metrics
