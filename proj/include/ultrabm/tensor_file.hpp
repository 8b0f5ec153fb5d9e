// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ultrabm/common.hpp"
#include "ultrabm/tensor.hpp"

namespace ultrabm {

// Named-tensor container, the on-disk format shared by checkpoints,
// precomputed semantic features, extractor weights and NIQE models.
//
// Layout (little-endian):
//   magic   "UBMTNSR1"            8 bytes
//   count   u32
//   entry*  { name_len u32, name bytes, rank u32, dims i64[rank], data f64[numel] }
//
// Entries preserve insertion order; doubles are written raw, so a
// write/read round trip is bit-exact.
class TensorFile {
public:
    static constexpr char kMagic[9] = "UBMTNSR1";

    void put(const std::string& name, Tensor t) {
        auto it = index_.find(name);
        if (it != index_.end()) {
            entries_[it->second].second = std::move(t);
            return;
        }
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("tensor file: missing entry '" + name + "'");
        return entries_[it->second].second;
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("tensor file: cannot open for writing: " + path);
        os.write(kMagic, 8);
        write_u32(os, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& [name, t] : entries_) {
            write_u32(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u32(os, static_cast<std::uint32_t>(t.rank()));
            for (int i = 0; i < t.rank(); ++i) {
                std::int64_t d = t.dim(i);
                os.write(reinterpret_cast<const char*>(&d), sizeof(d));
            }
            os.write(reinterpret_cast<const char*>(t.data()),
                     static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(Scalar))));
        }
        if (!os) throw IoError("tensor file: write failed: " + path);
    }

    static TensorFile load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("tensor file: cannot open: " + path);
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, kMagic, 8) != 0)
            throw ParseError("tensor file: bad magic in " + path);
        const std::uint32_t count = read_u32(is, path);
        TensorFile f;
        for (std::uint32_t e = 0; e < count; ++e) {
            const std::uint32_t name_len = read_u32(is, path);
            if (name_len > 4096) throw ParseError("tensor file: implausible name length in " + path);
            std::string name(name_len, '\0');
            is.read(name.data(), name_len);
            const std::uint32_t rank = read_u32(is, path);
            if (rank > 4) throw ParseError("tensor file: rank > 4 in " + path);
            std::vector<std::int64_t> dims(rank);
            for (auto& d : dims) is.read(reinterpret_cast<char*>(&d), sizeof(d));
            if (!is) throw ParseError("tensor file: truncated header in " + path);
            std::int64_t n = 1;
            for (std::int64_t d : dims) {
                if (d <= 0 || d > (1 << 28)) throw ParseError("tensor file: bad dimension in " + path);
                n *= d;
            }
            std::vector<Scalar> values(static_cast<std::size_t>(n));
            is.read(reinterpret_cast<char*>(values.data()),
                    static_cast<std::streamsize>(n * static_cast<std::int64_t>(sizeof(Scalar))));
            if (!is) throw ParseError("tensor file: truncated data in " + path);
            f.put(name, Tensor::from(std::move(dims), std::move(values)));
        }
        return f;
    }

private:
    static void write_u32(std::ofstream& os, std::uint32_t v) {
        os.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static std::uint32_t read_u32(std::ifstream& is, const std::string& path) {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!is) throw ParseError("tensor file: truncated: " + path);
        return v;
    }

    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace ultrabm
