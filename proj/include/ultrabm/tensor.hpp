// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ultrabm/common.hpp"

namespace ultrabm {

// Dense row-major tensor of doubles, rank 0..4. Copies share the buffer
// (cheap handle semantics); use clone() for a deep copy. Graph ops treat
// inputs as immutable and always allocate fresh outputs.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
        buf_ = std::make_shared<std::vector<Scalar>>(checked_numel(shape_), Scalar(0));
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, Scalar v) {
        Tensor t(std::move(shape));
        std::fill(t.buf_->begin(), t.buf_->end(), v);
        return t;
    }

    static Tensor from(std::vector<std::int64_t> shape, std::vector<Scalar> values) {
        if (checked_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("Tensor::from: value count does not match shape");
        Tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = std::make_shared<std::vector<Scalar>>(std::move(values));
        return t;
    }

    static Tensor scalar(Scalar v) { return full({1}, v); }

    bool defined() const { return buf_ != nullptr; }
    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<std::int64_t>& shape() const { return shape_; }

    std::int64_t dim(int i) const {
        if (i < 0 || i >= rank()) throw ShapeError("Tensor::dim: axis out of range");
        return shape_[static_cast<std::size_t>(i)];
    }

    std::int64_t numel() const { return buf_ ? static_cast<std::int64_t>(buf_->size()) : 0; }

    Scalar* data() { return buf_->data(); }
    const Scalar* data() const { return buf_->data(); }

    Scalar& operator[](std::int64_t i) { return (*buf_)[static_cast<std::size_t>(i)]; }
    Scalar operator[](std::int64_t i) const { return (*buf_)[static_cast<std::size_t>(i)]; }

    // Rank-4 accessors (B, C, H, W).
    std::int64_t idx4(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return ((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }
    Scalar& at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
        return (*buf_)[static_cast<std::size_t>(idx4(b, c, h, w))];
    }
    Scalar at(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return (*buf_)[static_cast<std::size_t>(idx4(b, c, h, w))];
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.buf_ = std::make_shared<std::vector<Scalar>>(*buf_);
        return t;
    }

    // Shares the buffer under a new shape with identical element count.
    Tensor reshaped(std::vector<std::int64_t> shape) const {
        if (checked_numel(shape) != numel()) throw ShapeError("Tensor::reshaped: element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.buf_ = buf_;
        return t;
    }

    void fill(Scalar v) { std::fill(buf_->begin(), buf_->end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Scalar min() const { return *std::min_element(buf_->begin(), buf_->end()); }
    Scalar max() const { return *std::max_element(buf_->begin(), buf_->end()); }

    Scalar sum() const;  // pairwise; defined after pairwise_sum below
    Scalar mean() const { return numel() > 0 ? sum() / static_cast<Scalar>(numel()) : Scalar(0); }

    Scalar abs_max() const {
        Scalar m = 0;
        for (Scalar v : *buf_) m = std::max(m, std::abs(v));
        return m;
    }

    bool all_finite() const {
        for (Scalar v : *buf_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (int i = 0; i < rank(); ++i) os << (i ? "," : "") << shape_[static_cast<std::size_t>(i)];
        os << ")";
        return os.str();
    }

private:
    static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t d : shape) {
            if (d <= 0) throw ShapeError("Tensor: dimensions must be positive");
            n *= d;
        }
        return n;
    }

    std::vector<std::int64_t> shape_;
    std::shared_ptr<std::vector<Scalar>> buf_;
};

// Pairwise (cascade) summation: better rounding behavior than a running
// sum, and exact for power-of-two counts of identical values.
inline Scalar pairwise_sum(const Scalar* p, std::int64_t n) {
    if (n <= 8) {
        Scalar s = 0;
        for (std::int64_t i = 0; i < n; ++i) s += p[i];
        return s;
    }
    const std::int64_t half = n / 2;
    return pairwise_sum(p, half) + pairwise_sum(p + half, n - half);
}

inline Scalar Tensor::sum() const {
    return numel() > 0 ? pairwise_sum(data(), numel()) : Scalar(0);
}

inline void require_rank(const Tensor& t, int r, const char* who) {
    if (t.rank() != r) throw ShapeError(std::string(who) + ": expected rank " + std::to_string(r) + " tensor, got " + t.shape_str());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b)) throw ShapeError(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// y += alpha * x over the raw buffers.
inline void axpy(Tensor& y, const Tensor& x, Scalar alpha = 1.0) {
    require_same_shape(y, x, "axpy");
    Scalar* yd = y.data();
    const Scalar* xd = x.data();
    const std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) yd[i] += alpha * xd[i];
}

}  // namespace ultrabm
