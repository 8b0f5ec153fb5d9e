// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "ultrabm/image.hpp"
#include "ultrabm/manifest.hpp"
#include "ultrabm/model.hpp"

namespace ultrabm::pipeline {

// ---------------------------------------------------------------------------
// Progressive schedule
// ---------------------------------------------------------------------------

struct StageSpec {
    int batch_size = 2;
    int patch_size = 32;  // low-resolution patch side
    std::int64_t iters = 1000;
};

using Schedule = std::vector<StageSpec>;

// Full-scale "paper" profile: batch sizes [8,5,4,2,1,1] over 150k
// iterations with a progressively growing patch size.
inline Schedule paper_schedule(std::int64_t total_iters = 150000) {
    const int batches[6] = {8, 5, 4, 2, 1, 1};
    const int patches[6] = {32, 48, 64, 96, 128, 128};
    Schedule s;
    for (int i = 0; i < 6; ++i) s.push_back({batches[i], patches[i], total_iters / 6});
    s.back().iters += total_iters - 6 * (total_iters / 6);
    return s;
}

inline Schedule desk_schedule(std::int64_t total_iters = 2000, int batch = 2, int patch = 32) {
    return {StageSpec{batch, patch, total_iters}};
}

inline std::int64_t schedule_total(const Schedule& s) {
    std::int64_t n = 0;
    for (const auto& st : s) n += st.iters;
    return n;
}

inline int stage_of(const Schedule& s, std::int64_t iter) {
    std::int64_t acc = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        acc += s[i].iters;
        if (iter < acc) return static_cast<int>(i);
    }
    return static_cast<int>(s.size()) - 1;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct LoadedPair {
    Tensor low;  // (1,3,H,W)
    Tensor ref;  // (1,3,sH,sW)
};

inline std::vector<LoadedPair> load_dataset(const image::PairManifest& manifest) {
    if (manifest.entries.empty()) throw ValidationError("dataset: manifest has no entries");
    std::vector<LoadedPair> data;
    for (const auto& e : manifest.entries) {
        LoadedPair p;
        p.low = image::load_image(e.low_path).data;
        p.ref = image::load_image(e.ref_path).data;
        if (p.ref.dim(2) != p.low.dim(2) * e.scale || p.ref.dim(3) != p.low.dim(3) * e.scale)
            throw ValidationError("dataset: " + e.ref_path + " is not scale " + std::to_string(e.scale) +
                                  " of " + e.low_path);
        data.push_back(std::move(p));
    }
    return data;
}

// Seed-determined batch assembly: index, crop offset and flips are drawn
// from the trainer RNG in a fixed order, so batches are reproducible
// regardless of how data loading is parallelized.
inline void sample_batch(const std::vector<LoadedPair>& data, const StageSpec& stage, int scale,
                         Rng& rng, Tensor& low_out, Tensor& ref_out, bool augment = true) {
    const std::int64_t B = stage.batch_size;
    std::int64_t p = stage.patch_size;
    for (const auto& d : data) p = std::min({p, d.low.dim(2), d.low.dim(3)});
    const std::int64_t sp = p * scale;
    low_out = Tensor({B, 3, p, p});
    ref_out = Tensor({B, 3, sp, sp});
    for (std::int64_t b = 0; b < B; ++b) {
        const auto& d = data[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(data.size())))];
        const std::int64_t oy = augment ? rng.uniform_int(d.low.dim(2) - p + 1) : (d.low.dim(2) - p) / 2;
        const std::int64_t ox = augment ? rng.uniform_int(d.low.dim(3) - p + 1) : (d.low.dim(3) - p) / 2;
        const bool fliph = augment && rng.coin();
        const bool flipv = augment && rng.coin();
        for (std::int64_t c = 0; c < 3; ++c) {
            for (std::int64_t y = 0; y < p; ++y)
                for (std::int64_t x = 0; x < p; ++x) {
                    const std::int64_t sy = flipv ? (p - 1 - y) : y;
                    const std::int64_t sx = fliph ? (p - 1 - x) : x;
                    low_out.at(b, c, y, x) = d.low.at(0, c, oy + sy, ox + sx);
                }
            for (std::int64_t y = 0; y < sp; ++y)
                for (std::int64_t x = 0; x < sp; ++x) {
                    const std::int64_t sy = flipv ? (sp - 1 - y) : y;
                    const std::int64_t sx = fliph ? (sp - 1 - x) : x;
                    ref_out.at(b, c, y, x) = d.ref.at(0, c, oy * scale + sy, ox * scale + sx);
                }
        }
    }
}

// ---------------------------------------------------------------------------
// Train step
// ---------------------------------------------------------------------------

struct LossRecord {
    std::int64_t iter = 0;
    Scalar l_sl = 0, l_is = 0, l_r = 0, l_p = 0, total = 0, lr = 0;
    int stage = 0;
};

struct TrainState {
    ModelConfig cfg;
    std::unique_ptr<Model> model;
    std::int64_t iter = 0;
    Rng rng;

    static TrainState fresh(const ModelConfig& cfg) {
        TrainState s;
        s.cfg = cfg;
        s.model = std::make_unique<Model>(Model::build(cfg));
        s.rng = Rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
        return s;
    }
};

// One Adam update on a (low, ref) batch; returns the loss components.
inline LossRecord train_step(TrainState& state, const Tensor& low, const Tensor& ref,
                             const nn::AdamConfig& adam, Scalar lr) {
    Model& m = *state.model;
    Graph g;
    nn::Binder bind(g, m.params, true);
    auto fwd = m.forward(bind, low);

    const Tensor gray = image::rgb_to_gray(low);
    Var l_sl = m.cfg.ablations.l_sl
                   ? losses::luminance_loss(g, fwd.v_nl, m.cfg.luminance_tolerance_band)
                   : g.constant(Tensor::scalar(0.0));
    Var l_is = losses::illum_smooth_loss(g, fwd.u_nl, g.constant(gray));
    Var l_r = losses::recon_loss(g, fwd.y_ns, g.constant(ref));
    Var l_p = m.cfg.ablations.l_p ? losses::perceptual_loss(bind, m.perceptual, fwd.y_ns, g.constant(ref))
                                  : g.constant(Tensor::scalar(0.0));
    losses::LossWeights w = m.cfg.loss_weights;
    if (!m.cfg.ablations.l_sl) w.luminance = 0.0;
    if (!m.cfg.ablations.l_p) w.perceptual = 0.0;
    Var total = losses::total_loss(g, l_sl, l_is, l_r, l_p, w);

    LossRecord rec;
    rec.iter = state.iter;
    rec.l_sl = g.val(l_sl)[0];
    rec.l_is = g.val(l_is)[0];
    rec.l_r = g.val(l_r)[0];
    rec.l_p = g.val(l_p)[0];
    rec.total = g.val(total)[0];
    rec.lr = lr;
    if (!std::isfinite(rec.total))
        throw TrainingError("train: non-finite total loss at iter " + std::to_string(state.iter) +
                            " (l_sl=" + std::to_string(rec.l_sl) + " l_is=" + std::to_string(rec.l_is) +
                            " l_r=" + std::to_string(rec.l_r) + " l_p=" + std::to_string(rec.l_p) + ")");

    m.params.zero_grads();
    g.backward(total);
    bind.pull_grads();
    nn::clip_grad_norm(m.params, adam.grad_clip_norm);
    state.iter += 1;
    nn::adam_step(m.params, adam, state.iter, lr);
    return rec;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace ckpt_detail {

inline void write_u32(std::ofstream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ofstream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_str(std::ofstream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void write_tensor(std::ofstream& os, const Tensor& t) {
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) {
        std::int64_t d = t.dim(i);
        os.write(reinterpret_cast<const char*>(&d), 8);
    }
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(Scalar))));
}

inline std::uint32_t read_u32(std::ifstream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw ParseError("checkpoint: truncated");
    return v;
}
inline std::uint64_t read_u64(std::ifstream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw ParseError("checkpoint: truncated");
    return v;
}
inline std::string read_str(std::ifstream& is) {
    const std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw ParseError("checkpoint: truncated");
    return s;
}
inline Tensor read_tensor(std::ifstream& is) {
    const std::uint32_t rank = read_u32(is);
    if (rank > 4) throw ParseError("checkpoint: bad tensor rank");
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) is.read(reinterpret_cast<char*>(&d), 8);
    std::int64_t n = 1;
    for (auto d : dims) n *= d;
    std::vector<Scalar> data(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * static_cast<std::int64_t>(sizeof(Scalar))));
    if (!is) throw ParseError("checkpoint: truncated tensor");
    return Tensor::from(std::move(dims), std::move(data));
}

}  // namespace ckpt_detail

// Versioned container: header (format version, config hash + JSON, iter,
// RNG state) followed by named value/moment tensors per parameter. Raw
// doubles, so save -> load -> train reproduces the unbroken run bit-exactly.
inline void save_checkpoint(const std::string& path, const TrainState& state) {
    namespace d = ckpt_detail;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot write " + path);
    os.write("UBMCKPT1", 8);
    d::write_u32(os, 1);  // format version
    d::write_u64(os, state.cfg.hash());
    d::write_u64(os, static_cast<std::uint64_t>(state.iter));
    d::write_str(os, state.rng.serialize());
    d::write_str(os, state.cfg.to_json().dump());
    const auto& params = state.model->params.all();
    d::write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        d::write_str(os, p.name);
        const char trainable = p.trainable ? 1 : 0;
        os.write(&trainable, 1);
        d::write_tensor(os, p.value);
        d::write_tensor(os, p.adam_m);
        d::write_tensor(os, p.adam_v);
    }
    if (!os) throw IoError("checkpoint: write failed " + path);
}

inline TrainState load_checkpoint(const std::string& path) {
    namespace d = ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "UBMCKPT1") throw ParseError("checkpoint: bad magic in " + path);
    const std::uint32_t version = d::read_u32(is);
    if (version != 1) throw ParseError("checkpoint: unsupported format version");
    const std::uint64_t cfg_hash = d::read_u64(is);
    const std::uint64_t iter = d::read_u64(is);
    const std::string rng_state = d::read_str(is);
    const std::string cfg_json = d::read_str(is);

    TrainState state;
    state.cfg = ModelConfig::from_json(nlohmann::json::parse(cfg_json));
    if (state.cfg.hash() != cfg_hash) throw ValidationError("checkpoint: config hash mismatch in " + path);
    state.model = std::make_unique<Model>(Model::build(state.cfg));
    state.iter = static_cast<std::int64_t>(iter);
    state.rng.deserialize(rng_state);

    const std::uint32_t count = d::read_u32(is);
    if (count != state.model->params.size())
        throw ValidationError("checkpoint: parameter count mismatch in " + path);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = d::read_str(is);
        char trainable = 0;
        is.read(&trainable, 1);
        nn::Param* p = state.model->params.find(name);
        if (!p) throw ValidationError("checkpoint: unknown parameter '" + name + "'");
        Tensor v = d::read_tensor(is);
        Tensor m = d::read_tensor(is);
        Tensor vv = d::read_tensor(is);
        if (!v.same_shape(p->value)) throw ValidationError("checkpoint: shape mismatch for '" + name + "'");
        p->value = std::move(v);
        p->adam_m = std::move(m);
        p->adam_v = std::move(vv);
    }
    return state;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
    Schedule schedule = desk_schedule();
    nn::AdamConfig adam;
    std::string out_dir;            // loss log + checkpoints; empty = no files
    std::int64_t ckpt_every = 500;  // 0 = final checkpoint only
    std::int64_t log_every = 1;
    std::int64_t stop_after = 0;    // pause at this iter (0 = run to schedule end)
    bool augment = true;            // random crop offset + flips
};

inline std::string loss_log_header() { return "iter,l_sl,l_is,l_r,l_p,total,lr,stage"; }

inline std::string loss_log_row(const LossRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d",
                  static_cast<long long>(r.iter), r.l_sl, r.l_is, r.l_r, r.l_p, r.total, r.lr, r.stage);
    return buf;
}

// Runs (or resumes) training to the end of the schedule. Returns the
// per-iteration loss records produced by this call.
inline std::vector<LossRecord> train(TrainState& state, const std::vector<LoadedPair>& data,
                                     const TrainOptions& opts) {
    if (data.empty()) throw ValidationError("train: empty dataset");
    const std::int64_t total = schedule_total(opts.schedule);
    std::ofstream log;
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        const auto log_path = std::filesystem::path(opts.out_dir) / "loss_log.csv";
        const bool fresh = state.iter == 0 || !std::filesystem::exists(log_path);
        log.open(log_path, fresh ? std::ios::out : std::ios::app);
        if (fresh) log << loss_log_header() << "\n";
    }

    std::vector<LossRecord> records;
    while (state.iter < total && (opts.stop_after == 0 || state.iter < opts.stop_after)) {
        const int stage_idx = stage_of(opts.schedule, state.iter);
        const StageSpec& stage = opts.schedule[static_cast<std::size_t>(stage_idx)];
        Tensor low, ref;
        sample_batch(data, stage, state.cfg.scale, state.rng, low, ref, opts.augment);
        const Scalar lr = nn::cosine_lr(opts.adam, state.iter, total);
        LossRecord rec = train_step(state, low, ref, opts.adam, lr);
        rec.stage = stage_idx;
        records.push_back(rec);
        if (log.is_open() && (rec.iter % opts.log_every == 0 || rec.iter + 1 == total))
            log << loss_log_row(rec) << "\n";
        if (!opts.out_dir.empty() && opts.ckpt_every > 0 && state.iter % opts.ckpt_every == 0 &&
            state.iter < total) {
            save_checkpoint((std::filesystem::path(opts.out_dir) /
                             ("ckpt_" + std::to_string(state.iter) + ".ubmc"))
                                .string(),
                            state);
        }
    }
    if (!opts.out_dir.empty())
        save_checkpoint((std::filesystem::path(opts.out_dir) / "ckpt_final.ubmc").string(), state);
    return records;
}

}  // namespace ultrabm::pipeline
