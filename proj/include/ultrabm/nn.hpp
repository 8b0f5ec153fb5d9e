// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ultrabm/graph.hpp"
#include "ultrabm/ops.hpp"
#include "ultrabm/rng.hpp"
#include "ultrabm/tensor.hpp"

namespace ultrabm::nn {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;     // accumulated by Binder::pull_grads
    Tensor adam_m;
    Tensor adam_v;
    bool trainable = true;
};

// Ordered parameter registry. Registration order is fixed by model
// construction order, which makes seeded initialization reproducible.
class ParamStore {
public:
    int add(std::string name, Tensor init, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("param registered twice: " + name);
        Param p;
        p.name = std::move(name);
        p.grad = Tensor::zeros(init.shape());
        p.adam_m = Tensor::zeros(init.shape());
        p.adam_v = Tensor::zeros(init.shape());
        p.value = std::move(init);
        p.trainable = trainable;
        index_[p.name] = static_cast<int>(params_.size());
        params_.push_back(std::move(p));
        return static_cast<int>(params_.size() - 1);
    }

    Param& at(int id) { return params_[static_cast<std::size_t>(id)]; }
    const Param& at(int id) const { return params_[static_cast<std::size_t>(id)]; }

    const Param* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[static_cast<std::size_t>(it->second)];
    }
    Param* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[static_cast<std::size_t>(it->second)];
    }

    std::size_t size() const { return params_.size(); }
    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }

    std::int64_t num_elements(bool trainable_only) const {
        std::int64_t n = 0;
        for (const auto& p : params_)
            if (!trainable_only || p.trainable) n += p.value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(0);
    }

private:
    std::vector<Param> params_;
    std::map<std::string, int> index_;
};

// Per-forward-pass binding of store params into a graph: each param gets
// exactly one leaf per pass, so gradient accumulation happens at the node.
class Binder {
public:
    Binder(Graph& g, ParamStore& store, bool train_mode = true)
        : g_(g), store_(store), train_(train_mode), bound_(store.size(), Var{}) {}

    Var operator()(int pid) {
        Var& v = bound_[static_cast<std::size_t>(pid)];
        if (!v.valid()) {
            Param& p = store_.at(pid);
            v = g_.leaf(p.value, train_ && p.trainable);
        }
        return v;
    }

    // Copies graph gradients back into the store (accumulating).
    void pull_grads() {
        for (std::size_t i = 0; i < bound_.size(); ++i) {
            const Var v = bound_[i];
            if (!v.valid() || !g_.requires_grad(v) || !g_.has_grad(v)) continue;
            axpy(store_.at(static_cast<int>(i)).grad, g_.grad(v));
        }
    }

    Graph& graph() { return g_; }

private:
    Graph& g_;
    ParamStore& store_;
    bool train_;
    std::vector<Var> bound_;
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

enum class Init { HeNormal, Zero };

inline Tensor conv_weight_init(Rng& rng, std::int64_t cout, std::int64_t cin_g, std::int64_t kh,
                               std::int64_t kw, Init kind) {
    Tensor w({cout, cin_g, kh, kw});
    if (kind == Init::Zero) return w;
    const Scalar fan_in = static_cast<Scalar>(cin_g * kh * kw);
    const Scalar std = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, std);
    return w;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv2dLayer {
    int w = -1;
    int b = -1;
    ops::ConvSpec spec;

    static Conv2dLayer create(ParamStore& ps, Rng& rng, const std::string& name, std::int64_t cin,
                              std::int64_t cout, int k, int stride = 1, int groups = 1,
                              Init kind = Init::HeNormal, bool bias = true, bool trainable = true) {
        Conv2dLayer l;
        l.spec.stride = stride;
        l.spec.pad = (k - 1) / 2;
        l.spec.groups = groups;
        l.w = ps.add(name + ".w", conv_weight_init(rng, cout, cin / groups, k, k, kind), trainable);
        if (bias) l.b = ps.add(name + ".b", Tensor::zeros({cout}), trainable);
        return l;
    }

    Var operator()(Binder& bind, Var x) const {
        return ops::conv2d(bind.graph(), x, bind(w), b >= 0 ? bind(b) : Var{}, spec);
    }
};

struct LayerNormChLayer {
    int gamma = -1;
    int beta = -1;

    static LayerNormChLayer create(ParamStore& ps, const std::string& name, std::int64_t c,
                                   bool trainable = true) {
        LayerNormChLayer l;
        l.gamma = ps.add(name + ".gamma", Tensor::full({c}, 1.0), trainable);
        l.beta = ps.add(name + ".beta", Tensor::zeros({c}), trainable);
        return l;
    }

    Var operator()(Binder& bind, Var x) const {
        return ops::layer_norm_ch(bind.graph(), x, bind(gamma), bind(beta));
    }
};

// Context Unit: two 3x3 convs with LeakyReLU(0.2) and an additive skip.
// The residual-closing conv starts at zero so stacked units neither
// amplify feature variance nor destabilize the Retinex division early in
// training; each unit is the identity until its second conv moves.
struct ContextUnit {
    Conv2dLayer c1, c2;

    static ContextUnit create(ParamStore& ps, Rng& rng, const std::string& name, std::int64_t c,
                              bool trainable = true) {
        ContextUnit u;
        u.c1 = Conv2dLayer::create(ps, rng, name + ".c1", c, c, 3, 1, 1, Init::HeNormal, true, trainable);
        u.c2 = Conv2dLayer::create(ps, rng, name + ".c2", c, c, 3, 1, 1, Init::Zero, true, trainable);
        return u;
    }

    Var operator()(Binder& bind, Var x) const {
        Graph& g = bind.graph();
        Var h = ops::leaky_relu(g, c1(bind, x));
        h = ops::leaky_relu(g, c2(bind, h));
        return ops::add(g, h, x);
    }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    Scalar lr_initial = 2e-4;
    Scalar lr_min = 1e-6;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    Scalar weight_decay = 1e-4;   // decoupled
    Scalar grad_clip_norm = 1.0;  // global L2 clip; <= 0 disables
};

// Cosine decay from lr_initial to lr_min over total_iters.
inline Scalar cosine_lr(const AdamConfig& cfg, std::int64_t iter, std::int64_t total_iters) {
    if (total_iters <= 1) return cfg.lr_initial;
    const Scalar t = static_cast<Scalar>(std::min(iter, total_iters - 1)) / static_cast<Scalar>(total_iters - 1);
    return cfg.lr_min + 0.5 * (cfg.lr_initial - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Scales all trainable gradients so their global L2 norm is at most
// max_norm. Returns the pre-clip norm.
inline Scalar clip_grad_norm(ParamStore& ps, Scalar max_norm) {
    Scalar sq = 0;
    for (const auto& p : ps.all()) {
        if (!p.trainable) continue;
        const Scalar* g = p.grad.data();
        for (std::int64_t i = 0; i < p.grad.numel(); ++i) sq += g[i] * g[i];
    }
    const Scalar norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const Scalar scale = max_norm / norm;
        for (auto& p : ps.all()) {
            if (!p.trainable) continue;
            Scalar* g = p.grad.data();
            for (std::int64_t i = 0; i < p.grad.numel(); ++i) g[i] *= scale;
        }
    }
    return norm;
}

// One decoupled-weight-decay Adam step over all trainable params.
// `t` is the 1-based step count used for bias correction.
inline void adam_step(ParamStore& ps, const AdamConfig& cfg, std::int64_t t, Scalar lr) {
    const Scalar bc1 = 1.0 - std::pow(cfg.beta1, static_cast<Scalar>(t));
    const Scalar bc2 = 1.0 - std::pow(cfg.beta2, static_cast<Scalar>(t));
    for (auto& p : ps.all()) {
        if (!p.trainable) continue;
        Scalar* pv = p.value.data();
        Scalar* pg = p.grad.data();
        Scalar* pm = p.adam_m.data();
        Scalar* pvv = p.adam_v.data();
        const std::int64_t n = p.value.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            pm[i] = cfg.beta1 * pm[i] + (1.0 - cfg.beta1) * pg[i];
            pvv[i] = cfg.beta2 * pvv[i] + (1.0 - cfg.beta2) * pg[i] * pg[i];
            const Scalar mhat = pm[i] / bc1;
            const Scalar vhat = pvv[i] / bc2;
            pv[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * pv[i]);
        }
    }
}

}  // namespace ultrabm::nn
