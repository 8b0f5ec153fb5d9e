// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ultrabm/common.hpp"

namespace ultrabm::image {

// Paired-dataset manifest: a JSON array of
//   {"low": str, "ref": str, "scale": int, "ev": float}
// with paths resolved against the manifest's own directory.
struct PairEntry {
    std::string low_path;
    std::string ref_path;
    int scale = 1;
    Scalar ev = 0.0;
};

struct PairManifest {
    std::vector<PairEntry> entries;

    int scale() const { return entries.empty() ? 0 : entries.front().scale; }
};

inline PairManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("manifest: cannot open: " + path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("manifest: " + path + ": " + e.what());
    }
    if (!doc.is_array()) throw ParseError("manifest: " + path + ": top-level value must be an array");

    const auto base = std::filesystem::path(path).parent_path();
    PairManifest m;
    std::size_t i = 0;
    for (const auto& item : doc) {
        const std::string where = "manifest: " + path + ": entry " + std::to_string(i);
        if (!item.is_object()) throw ParseError(where + ": must be an object");
        for (const char* key : {"low", "ref", "scale", "ev"})
            if (!item.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
        if (!item["low"].is_string() || !item["ref"].is_string())
            throw ParseError(where + ": 'low'/'ref' must be strings");
        if (!item["scale"].is_number_integer()) throw ParseError(where + ": 'scale' must be an integer");
        if (!item["ev"].is_number()) throw ParseError(where + ": 'ev' must be a number");

        PairEntry e;
        e.scale = item["scale"].get<int>();
        e.ev = item["ev"].get<Scalar>();
        if (e.scale != 1 && e.scale != 2 && e.scale != 4)
            throw ValidationError(where + ": scale must be one of {1,2,4}");
        auto resolve = [&](const std::string& p) {
            std::filesystem::path fp(p);
            if (fp.is_relative()) fp = base / fp;
            return fp.string();
        };
        e.low_path = resolve(item["low"].get<std::string>());
        e.ref_path = resolve(item["ref"].get<std::string>());
        for (const auto& fp : {e.low_path, e.ref_path})
            if (!std::filesystem::exists(fp))
                throw ValidationError(where + ": referenced file does not exist: " + fp);
        if (!m.entries.empty() && e.scale != m.entries.front().scale)
            throw ValidationError(where + ": mixed scales in one manifest (" +
                                  std::to_string(m.entries.front().scale) + " vs " +
                                  std::to_string(e.scale) + ")");
        m.entries.push_back(std::move(e));
        ++i;
    }
    return m;
}

inline void save_manifest(const std::string& path, const std::vector<PairEntry>& entries,
                          bool relative_names = true) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& e : entries) {
        auto name = [&](const std::string& p) {
            return relative_names ? std::filesystem::path(p).filename().string() : p;
        };
        doc.push_back({{"low", name(e.low_path)}, {"ref", name(e.ref_path)}, {"scale", e.scale}, {"ev", e.ev}});
    }
    std::ofstream os(path);
    if (!os) throw IoError("manifest: cannot write: " + path);
    os << doc.dump(2) << "\n";
}

}  // namespace ultrabm::image
