// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "ultrabm/common.hpp"

namespace ultrabm {

// Deterministic RNG wrapper. All sampling paths go through explicit
// transforms of raw engine output, never through std::*_distribution,
// whose hidden state would break checkpoint round-trip bit-exactness.
class Rng {
public:
    Rng() : eng_(0) {}
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    Scalar uniform() { return static_cast<Scalar>(eng_() >> 11) * 0x1.0p-53; }

    Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

    // Uniform in [0, n). Modulo bias is negligible for n << 2^64.
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(n));
    }

    bool coin() { return (eng_() & 1u) != 0; }

    // Box-Muller without the cached spare, so each call consumes exactly
    // two engine draws and the state stays fully serializable.
    Scalar normal() {
        Scalar u1 = uniform();
        Scalar u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const Scalar r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    Scalar normal(Scalar mean, Scalar stddev) { return mean + stddev * normal(); }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (!is) throw ParseError("rng: malformed engine state string");
    }

private:
    std::mt19937_64 eng_;
};

// Stable 64-bit FNV-1a, used for config hashes and seed derivation.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace ultrabm
