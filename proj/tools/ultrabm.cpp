// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Operator CLI: synthetic-data generation, training, evaluation,
// single-image inference and NIQE pristine-model fitting.
//
// Exit codes: 0 success, 1 usage error, 2 validation/config/format error,
// 3 runtime or numeric error.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ultrabm/evaluate.hpp"
#include "ultrabm/image.hpp"
#include "ultrabm/manifest.hpp"
#include "ultrabm/model.hpp"
#include "ultrabm/niqe.hpp"
#include "ultrabm/synthetic.hpp"
#include "ultrabm/train.hpp"

namespace fs = std::filesystem;
using namespace ultrabm;
using nlohmann::json;

namespace {

struct UsageError : Error {
    using Error::Error;
};

// Merged file-plus-flags configuration. Flags always win; file values fill
// options the user did not pass. The fully resolved configuration is
// written to the output directory before any work starts.
class RunConfig {
public:
    RunConfig(CLI::App* cmd, const std::string& config_path) : cmd_(cmd) {
        if (!config_path.empty()) {
            std::ifstream is(config_path);
            if (!is) throw IoError("config: cannot open " + config_path);
            try {
                file_ = json::parse(is);
            } catch (const json::parse_error& e) {
                throw ParseError("config: " + config_path + ": " + e.what());
            }
            if (!file_.is_object()) throw ParseError("config: " + config_path + ": must be a JSON object");
        }
    }

    template <class T>
    void merge(const std::string& key, T& value) {
        const CLI::Option* opt = cmd_->get_option("--" + key);
        if (opt->count() == 0 && file_.contains(key)) {
            try {
                value = file_.at(key).get<T>();
            } catch (const json::exception& e) {
                throw ParseError("config: key '" + key + "': " + e.what());
            }
        }
        resolved_[key] = value;
    }

    void note(const std::string& key, const json& v) { resolved_[key] = v; }

    void write(const fs::path& out_dir, const std::string& command) const {
        fs::create_directories(out_dir);
        json doc = resolved_;
        doc["command"] = command;
        std::ofstream os(out_dir / "resolved_config.json");
        os << doc.dump(2) << "\n";
    }

private:
    CLI::App* cmd_;
    json file_ = json::object();
    json resolved_ = json::object();
};

// "lo..hi" or a single value.
std::pair<Scalar, Scalar> parse_ev_range(const std::string& s) {
    const auto pos = s.find("..");
    try {
        if (pos == std::string::npos) {
            const Scalar v = std::stod(s);
            return {v, v};
        }
        return {std::stod(s.substr(0, pos)), std::stod(s.substr(pos + 2))};
    } catch (const std::exception&) {
        throw UsageError("--ev expects '<lo>..<hi>' or a single value, got '" + s + "'");
    }
}

const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names{"isdm", "imu", "smu", "rsmu", "fsi", "l_sl", "l_p"};
    return names;
}

void apply_ablations(pipeline::ModelConfig& cfg, const std::vector<std::string>& ablate) {
    for (const auto& name : ablate) {
        if (name == "isdm") {
            cfg.ablations.isdm = false;
            cfg.ablations.imu = false;
            cfg.ablations.smu = false;
        } else if (name == "imu") {
            cfg.ablations.imu = false;
        } else if (name == "smu") {
            cfg.ablations.smu = false;
        } else if (name == "rsmu") {
            cfg.ablations.rsmu = false;
        } else if (name == "fsi") {
            cfg.ablations.fsi = false;
        } else if (name == "l_sl") {
            cfg.ablations.l_sl = false;
        } else if (name == "l_p") {
            cfg.ablations.l_p = false;
        } else {
            std::string valid;
            for (const auto& n : ablation_names()) valid += (valid.empty() ? "" : ", ") + n;
            throw UsageError("unknown ablation '" + name + "'; valid names: " + valid);
        }
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(CLI::App* cmd, const std::string& config_path, std::string out_dir, int count,
                 int scale, int size, std::string ev, std::uint64_t seed, Scalar noise_sigma,
                 bool force) {
    RunConfig rc(cmd, config_path);
    rc.merge("out", out_dir);
    rc.merge("count", count);
    rc.merge("scale", scale);
    rc.merge("size", size);
    rc.merge("ev", ev);
    rc.merge("seed", seed);
    rc.merge("noise-sigma", noise_sigma);

    const fs::path dir(out_dir);
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ValidationError("gen-data: output directory " + out_dir +
                              " is not empty; pass --force to write into it");
    rc.write(dir, "gen-data");

    const auto [ev_lo, ev_hi] = parse_ev_range(ev);
    Rng rng(seed);
    std::vector<image::PairEntry> entries;
    for (int i = 0; i < count; ++i) {
        const Scalar ev_i = ev_lo == ev_hi ? ev_lo : rng.uniform(std::min(ev_lo, ev_hi), std::max(ev_lo, ev_hi));
        const std::uint64_t seed_i = seed * 1000003ull + static_cast<std::uint64_t>(i);
        auto pair = image::make_synthetic_pair(seed_i, ev_i, scale, {size, size}, noise_sigma);
        char name[32];
        std::snprintf(name, sizeof(name), "low_%04d.png", i);
        const std::string low_path = (dir / name).string();
        std::snprintf(name, sizeof(name), "ref_%04d.png", i);
        const std::string ref_path = (dir / name).string();
        image::save_image(low_path, pair.low);
        image::save_image(ref_path, pair.ref);
        entries.push_back({low_path, ref_path, scale, ev_i});
    }
    image::save_manifest((dir / "manifest.json").string(), entries);
    std::cout << "wrote " << count << " pairs + manifest to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(CLI::App* cmd, const std::string& config_path, std::string data, std::string out_dir,
              std::string profile, int scale, std::uint64_t seed, std::int64_t iters, int batch,
              int patch, Scalar lr, std::vector<std::string> ablate, std::string resume,
              std::int64_t ckpt_every, bool no_augment, std::int64_t log_every) {
    RunConfig rc(cmd, config_path);
    rc.merge("data", data);
    rc.merge("out", out_dir);
    rc.merge("profile", profile);
    rc.merge("scale", scale);
    rc.merge("seed", seed);
    rc.merge("iters", iters);
    rc.merge("batch", batch);
    rc.merge("patch", patch);
    rc.merge("lr", lr);
    rc.merge("ckpt-every", ckpt_every);
    rc.merge("log-every", log_every);

    if (profile != "desk" && profile != "paper")
        throw UsageError("--profile must be 'desk' or 'paper', got '" + profile + "'");

    pipeline::TrainOptions opts;
    if (profile == "paper") {
        opts.schedule = pipeline::paper_schedule(iters > 0 ? iters : 150000);
        opts.adam.lr_initial = lr > 0 ? lr : 2e-4;
        opts.adam.lr_min = 1e-6;
    } else {
        opts.schedule = pipeline::desk_schedule(iters > 0 ? iters : 2000, batch > 0 ? batch : 2,
                                                patch > 0 ? patch : 32);
        opts.adam.lr_initial = lr > 0 ? lr : 1e-3;
        opts.adam.lr_min = 1e-4;
    }
    opts.out_dir = out_dir;
    opts.ckpt_every = ckpt_every;
    opts.log_every = log_every;
    opts.augment = !no_augment;

    const auto manifest = image::load_manifest(data);
    const auto dataset = pipeline::load_dataset(manifest);

    pipeline::TrainState state;
    if (!resume.empty()) {
        state = pipeline::load_checkpoint(resume);
        if (cmd->get_option("--scale")->count() && state.cfg.scale != scale)
            throw ValidationError("train: checkpoint scale " + std::to_string(state.cfg.scale) +
                                  " conflicts with --scale " + std::to_string(scale));
    } else {
        pipeline::ModelConfig cfg;
        cfg.scale = scale;
        cfg.seed = seed;
        apply_ablations(cfg, ablate);
        if (!manifest.entries.empty() && manifest.scale() != cfg.scale)
            throw ValidationError("train: manifest scale " + std::to_string(manifest.scale()) +
                                  " does not match --scale " + std::to_string(cfg.scale));
        state = pipeline::TrainState::fresh(cfg);
    }
    rc.note("model_config", state.cfg.to_json());
    rc.note("augment", opts.augment);
    rc.note("resume", resume);
    rc.write(out_dir, "train");

    const auto records = pipeline::train(state, dataset, opts);
    std::cout << "trained to iter " << state.iter << "; final total loss "
              << (records.empty() ? 0.0 : records.back().total) << "; checkpoint "
              << (fs::path(out_dir) / "ckpt_final.ubmc").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

Tensor hstack_images(const std::vector<Tensor>& imgs) {
    const std::int64_t H = imgs[0].dim(2);
    std::int64_t W = 0;
    for (const auto& t : imgs) W += t.dim(3);
    Tensor out({1, 3, H, W});
    std::int64_t x0 = 0;
    for (const auto& t : imgs) {
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < H; ++y)
                std::copy_n(t.data() + t.idx4(0, c, y, 0), t.dim(3), out.data() + out.idx4(0, c, y, x0));
        x0 += t.dim(3);
    }
    return out;
}

int cmd_eval(CLI::App* cmd, const std::string& config_path, std::string checkpoint, std::string data,
             std::string out_dir, std::string niqe_model_path, std::string lpips_extractor,
             std::string lpips_weights, bool grid) {
    RunConfig rc(cmd, config_path);
    rc.merge("checkpoint", checkpoint);
    rc.merge("data", data);
    rc.merge("out", out_dir);
    rc.merge("niqe-model", niqe_model_path);
    rc.merge("lpips-extractor", lpips_extractor);
    rc.merge("lpips-weights", lpips_weights);
    rc.note("grid", grid);
    rc.write(out_dir, "eval");

    auto state = pipeline::load_checkpoint(checkpoint);
    const auto manifest = image::load_manifest(data);

    pipeline::EvalOptions opts;
    if (!niqe_model_path.empty()) opts.niqe_model = metrics::NiqeModel::load(niqe_model_path);
    metrics::Lpips lp = lpips_extractor.empty() ? metrics::Lpips::builtin()
                                                : metrics::Lpips::from_files(lpips_extractor, lpips_weights);
    opts.lpips = &lp;

    const auto report = pipeline::evaluate(*state.model, manifest, opts);
    const fs::path dir(out_dir);
    report.write_csv((dir / "report.csv").string());
    report.write_json((dir / "report.json").string());

    if (grid) {
        for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
            const auto& e = manifest.entries[i];
            const Tensor low = image::load_image(e.low_path).data;
            const Tensor ref = image::load_image(e.ref_path).data;
            const Tensor y = pipeline::infer_image(*state.model, low);
            const Tensor up = resize_bicubic(low, ref.dim(2), ref.dim(3));
            Tensor up_clamped = up.clone();
            for (std::int64_t j = 0; j < up_clamped.numel(); ++j)
                up_clamped[j] = std::min(std::max(up_clamped[j], 0.0), 1.0);
            char name[32];
            std::snprintf(name, sizeof(name), "grid_%04zu.png", i);
            image::save_image((dir / name).string(), {hstack_images({up_clamped, y, ref})});
        }
    }
    const auto agg = report.aggregate();
    std::cout << "evaluated " << report.rows.size() << " pairs: mean PSNR " << agg.psnr << " dB, SSIM "
              << agg.ssim << ", RMSE " << agg.rmse << ", LPIPS " << agg.lpips
              << (report.lpips_calibrated ? "" : " (uncalibrated)") << ", LOE " << agg.loe << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int cmd_infer(CLI::App* cmd, const std::string& config_path, std::string checkpoint, std::string input,
              std::string output, int scale) {
    RunConfig rc(cmd, config_path);
    rc.merge("checkpoint", checkpoint);
    rc.merge("input", input);
    rc.merge("out", output);
    auto state = pipeline::load_checkpoint(checkpoint);
    if (cmd->get_option("--scale")->count() && scale != state.cfg.scale)
        throw ValidationError("infer: checkpoint scale " + std::to_string(state.cfg.scale) +
                              " conflicts with --scale " + std::to_string(scale));
    const auto parent = fs::path(output).parent_path();
    if (!parent.empty()) {
        fs::create_directories(parent);
        rc.write(parent, "infer");
    }
    const auto img = image::load_image(input);
    const Tensor y = pipeline::infer_image(*state.model, img.data);
    image::save_image(output, {y});
    std::cout << "wrote " << y.dim(3) << "x" << y.dim(2) << " image to " << output << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// fit-niqe
// ---------------------------------------------------------------------------

int cmd_fit_niqe(std::string out, int count, std::uint64_t seed, int size, int patch) {
    std::vector<Tensor> imgs;
    for (int i = 0; i < count; ++i) {
        auto pair = image::make_synthetic_pair(seed + static_cast<std::uint64_t>(i), 0.0, 2,
                                               {size, size}, 0.0);
        imgs.push_back(pair.ref.data);
    }
    const auto model = metrics::fit_niqe_model(imgs, patch);
    const auto parent = fs::path(out).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    model.save(out);
    std::cout << "fitted NIQE pristine model over " << count << " images, saved to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"UltraBM low-light super-resolution toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override file keys")
        ->configurable(false);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate synthetic dark/bright training pairs");
    std::string g_out = "data";
    int g_count = 4, g_scale = 2, g_size = 32;
    std::string g_ev = "-2.5..-5.0";
    std::uint64_t g_seed = 0;
    Scalar g_sigma = 0.01;
    bool g_force = false;
    gen->add_option("--out", g_out, "output directory");
    gen->add_option("--count", g_count, "number of pairs");
    gen->add_option("--scale", g_scale, "super-resolution factor (2 or 4)");
    gen->add_option("--size", g_size, "low-resolution side length");
    gen->add_option("--ev", g_ev, "exposure range 'lo..hi' or single value");
    gen->add_option("--seed", g_seed, "generator seed");
    gen->add_option("--noise-sigma", g_sigma, "additive noise sigma");
    gen->add_flag("--force", g_force, "write into a non-empty directory");

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a paired manifest");
    std::string t_data, t_out = "run", t_profile = "desk", t_resume;
    int t_scale = 2, t_batch = 0, t_patch = 0;
    std::uint64_t t_seed = 0;
    std::int64_t t_iters = 0, t_ckpt_every = 500, t_log_every = 1;
    Scalar t_lr = 0;
    std::vector<std::string> t_ablate;
    bool t_no_augment = false;
    tr->add_option("--data", t_data, "manifest JSON path");
    tr->add_option("--out", t_out, "output directory (checkpoints, loss log)");
    tr->add_option("--profile", t_profile, "training profile: desk or paper");
    tr->add_option("--scale", t_scale, "super-resolution factor (2 or 4)");
    tr->add_option("--seed", t_seed, "model/init/data-order seed");
    tr->add_option("--iters", t_iters, "total iterations (0 = profile default)");
    tr->add_option("--batch", t_batch, "batch size (desk profile; 0 = default)");
    tr->add_option("--patch", t_patch, "low-res patch size (desk profile; 0 = default)");
    tr->add_option("--lr", t_lr, "initial learning rate (0 = profile default)");
    tr->add_option("--ablate", t_ablate, "components to disable")->delimiter(',');
    tr->add_option("--resume", t_resume, "checkpoint to resume from");
    tr->add_option("--ckpt-every", t_ckpt_every, "checkpoint interval (0 = final only)");
    tr->add_option("--log-every", t_log_every, "loss-log interval");
    tr->add_flag("--no-augment", t_no_augment, "disable random crops/flips");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a paired manifest");
    std::string e_ckpt, e_data, e_out = "eval_out", e_niqe, e_lpx, e_lpw;
    bool e_grid = false;
    ev->add_option("--checkpoint", e_ckpt, "checkpoint path")->required();
    ev->add_option("--data", e_data, "manifest JSON path")->required();
    ev->add_option("--out", e_out, "output directory for reports");
    ev->add_option("--niqe-model", e_niqe, "NIQE pristine model file (else NIQE = NaN)");
    ev->add_option("--lpips-extractor", e_lpx, "external LPIPS extractor weights");
    ev->add_option("--lpips-weights", e_lpw, "external LPIPS channel weights");
    ev->add_flag("--grid", e_grid, "write input|output|reference comparison mosaics");

    // infer
    auto* in = app.add_subcommand("infer", "Enhance a single PNG");
    std::string i_ckpt, i_input, i_output = "enhanced.png";
    int i_scale = 2;
    in->add_option("--checkpoint", i_ckpt, "checkpoint path")->required();
    in->add_option("--input", i_input, "input PNG")->required();
    in->add_option("--out", i_output, "output PNG path");
    in->add_option("--scale", i_scale, "expected scale (checked against the checkpoint)");

    // fit-niqe
    auto* fn = app.add_subcommand("fit-niqe", "Fit a NIQE pristine model on synthetic references");
    std::string n_out = "niqe_model.ubmt";
    int n_count = 24, n_size = 64, n_patch = 32;
    std::uint64_t n_seed = 1000;
    fn->add_option("--out", n_out, "output model file");
    fn->add_option("--count", n_count, "number of pristine images");
    fn->add_option("--seed", n_seed, "generator seed base");
    fn->add_option("--size", n_size, "low-res size of generated pairs (refs are 2x)");
    fn->add_option("--patch", n_patch, "NIQE patch size");

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return cmd_gen_data(gen, config_path, g_out, g_count, g_scale, g_size, g_ev, g_seed, g_sigma,
                                g_force);
        if (tr->parsed())
            return cmd_train(tr, config_path, t_data, t_out, t_profile, t_scale, t_seed, t_iters,
                             t_batch, t_patch, t_lr, t_ablate, t_resume, t_ckpt_every, t_no_augment,
                             t_log_every);
        if (ev->parsed())
            return cmd_eval(ev, config_path, e_ckpt, e_data, e_out, e_niqe, e_lpx, e_lpw, e_grid);
        if (in->parsed()) return cmd_infer(in, config_path, i_ckpt, i_input, i_output, i_scale);
        if (fn->parsed()) return cmd_fit_niqe(n_out, n_count, n_seed, n_size, n_patch);
        return 1;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
