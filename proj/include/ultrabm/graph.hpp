// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "ultrabm/common.hpp"
#include "ultrabm/tensor.hpp"

namespace ultrabm {

// Handle into a Graph's node tape.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Eager reverse-mode autodiff tape. Ops compute values immediately and
// append a node whose backward closure scatters the node's gradient into
// its parents. Nodes are appended in topological order, so the backward
// sweep is a single reverse pass over the ancestors of the loss node.
class Graph {
public:
    using BackFn = std::function<void(Graph&, Var)>;

    Var leaf(Tensor value, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, {}, nullptr});
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var emit(Tensor value, std::vector<Var> parents, BackFn back) {
        bool rg = false;
        std::vector<std::int32_t> pids;
        pids.reserve(parents.size());
        for (Var p : parents) {
            check(p);
            pids.push_back(p.id);
            rg = rg || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), Tensor(), rg, std::move(pids), rg ? std::move(back) : nullptr});
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    const Tensor& val(Var v) const {
        check(v);
        return nodes_[static_cast<std::size_t>(v.id)].value;
    }

    bool requires_grad(Var v) const {
        check(v);
        return nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }

    // Gradient buffer, allocated to zeros on first access.
    Tensor& grad(Var v) {
        check(v);
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape());
        return n.grad;
    }

    bool has_grad(Var v) const {
        check(v);
        return nodes_[static_cast<std::size_t>(v.id)].grad.defined();
    }

    // Reverse sweep from a scalar root. Only ancestors of the root that
    // can influence a grad-requiring leaf are visited.
    void backward(Var root) {
        check(root);
        if (val(root).numel() != 1) throw ShapeError("backward: root must be a scalar");
        std::vector<char> reach(nodes_.size(), 0);
        std::vector<std::int32_t> stack{root.id};
        reach[static_cast<std::size_t>(root.id)] = 1;
        while (!stack.empty()) {
            const std::int32_t i = stack.back();
            stack.pop_back();
            for (std::int32_t p : nodes_[static_cast<std::size_t>(i)].parents) {
                if (!reach[static_cast<std::size_t>(p)] && nodes_[static_cast<std::size_t>(p)].requires_grad) {
                    reach[static_cast<std::size_t>(p)] = 1;
                    stack.push_back(p);
                }
            }
        }
        grad(root)[0] = 1.0;
        for (std::int32_t i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!reach[static_cast<std::size_t>(i)] || !n.back || !n.grad.defined()) continue;
            n.back(*this, Var{i});
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::vector<std::int32_t> parents;
        BackFn back;
    };

    void check(Var v) const {
        if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw Error("graph: invalid Var handle");
    }

    // deque keeps node references stable while the tape grows, so values
    // returned by val()/grad() stay valid across later op emissions.
    std::deque<Node> nodes_;
};

}  // namespace ultrabm
