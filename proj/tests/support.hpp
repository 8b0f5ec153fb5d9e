// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ultrabm/graph.hpp"
#include "ultrabm/nn.hpp"
#include "ultrabm/rng.hpp"
#include "ultrabm/tensor.hpp"

namespace ubmtest {

using ultrabm::Graph;
using ultrabm::Rng;
using ultrabm::Scalar;
using ultrabm::Tensor;
using ultrabm::Var;

inline Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, Scalar lo = -1.0, Scalar hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Builds a scalar loss from leaf vars bound to `inputs`.
using LossBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckReport {
    Scalar max_rel_err = 0.0;
    Scalar max_abs_err = 0.0;
    std::int64_t probes = 0;
};

inline Scalar eval_loss(const std::vector<Tensor>& inputs, const LossBuilder& build) {
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(g.leaf(t, false));
    return g.val(build(g, leaves))[0];
}

// Central-difference gradient check of d(loss)/d(inputs). Probes up to
// `max_probes_per_input` elements per input (all when it fits).
inline GradCheckReport grad_check(const std::vector<Tensor>& inputs, const LossBuilder& build,
                                  Scalar step = 1e-5, std::int64_t max_probes_per_input = 64,
                                  std::uint64_t probe_seed = 1234) {
    // Analytic pass.
    std::vector<Tensor> analytic;
    {
        Graph g;
        std::vector<Var> leaves;
        for (const auto& t : inputs) leaves.push_back(g.leaf(t.clone(), true));
        Var loss = build(g, leaves);
        g.backward(loss);
        for (Var v : leaves) analytic.push_back(g.grad(v).clone());
    }

    GradCheckReport rep;
    Rng probe_rng(probe_seed);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::int64_t n = inputs[k].numel();
        std::vector<std::int64_t> idx;
        if (n <= max_probes_per_input) {
            idx.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        } else {
            for (std::int64_t i = 0; i < max_probes_per_input; ++i) idx.push_back(probe_rng.uniform_int(n));
        }
        for (std::int64_t j : idx) {
            std::vector<Tensor> plus, minus;
            for (std::size_t m = 0; m < inputs.size(); ++m) {
                plus.push_back(m == k ? inputs[m].clone() : inputs[m]);
                minus.push_back(m == k ? inputs[m].clone() : inputs[m]);
            }
            plus[k][j] += step;
            minus[k][j] -= step;
            const Scalar fd = (eval_loss(plus, build) - eval_loss(minus, build)) / (2.0 * step);
            const Scalar an = analytic[k][j];
            const Scalar abs_err = std::abs(an - fd);
            const Scalar denom = std::max({std::abs(an), std::abs(fd), Scalar(1e-8)});
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
            ++rep.probes;
        }
    }
    return rep;
}

inline Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    Scalar m = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Nudges every trainable parameter off its initialization point. Gradient
// checks need a generic interior point: zero-initialized residual convs
// otherwise park activations exactly on the LeakyReLU kink, where central
// differences straddle two subgradients.
inline void perturb_params(ultrabm::nn::ParamStore& ps, Rng& rng, Scalar scale = 0.05) {
    for (auto& p : ps.all()) {
        if (!p.trainable) continue;
        for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value[i] += rng.normal(0.0, scale);
    }
}

// Builds a scalar loss over store-bound parameters.
using ParamLoss = std::function<Var(ultrabm::Graph&, ultrabm::nn::Binder&)>;

// Central-difference check of d(loss)/d(theta) for trainable store params,
// probing a few elements of each.
inline GradCheckReport param_grad_check(ultrabm::nn::ParamStore& ps, const ParamLoss& loss_fn,
                                        Scalar step = 1e-3, int probes_per_param = 3,
                                        std::uint64_t probe_seed = 99) {
    ps.zero_grads();
    {
        Graph g;
        ultrabm::nn::Binder bind(g, ps, true);
        Var loss = loss_fn(g, bind);
        g.backward(loss);
        bind.pull_grads();
    }
    auto eval = [&]() {
        Graph g;
        ultrabm::nn::Binder bind(g, ps, false);
        return g.val(loss_fn(g, bind))[0];
    };
    GradCheckReport rep;
    Rng rng(probe_seed);
    for (auto& p : ps.all()) {
        if (!p.trainable) continue;
        for (int k = 0; k < probes_per_param; ++k) {
            const std::int64_t j = rng.uniform_int(p.value.numel());
            const Scalar keep = p.value[j];
            p.value[j] = keep + step;
            const Scalar fp = eval();
            p.value[j] = keep - step;
            const Scalar fm = eval();
            p.value[j] = keep;
            const Scalar fd = (fp - fm) / (2.0 * step);
            const Scalar an = p.grad[j];
            const Scalar abs_err = std::abs(an - fd);
            const Scalar denom = std::max({std::abs(an), std::abs(fd), Scalar(1e-6)});
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
            ++rep.probes;
        }
    }
    return rep;
}

}  // namespace ubmtest
