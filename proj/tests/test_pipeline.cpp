// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "ultrabm/evaluate.hpp"
#include "ultrabm/model.hpp"
#include "ultrabm/synthetic.hpp"
#include "ultrabm/train.hpp"

using namespace ultrabm;
using pipeline::Model;
using pipeline::ModelConfig;

#ifndef UBM_SOURCE_DIR
#define UBM_SOURCE_DIR "."
#endif

namespace {

namespace fs = std::filesystem;

fs::path test_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("ubm_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Independent trainable-parameter counting oracle built from the
// architecture arithmetic (conv = Cout*Cin/g*k^2 + Cout, LN = 2C).
std::int64_t expected_param_count(const ModelConfig& cfg) {
    auto conv = [](std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t groups = 1) {
        return cout * (cin / groups) * k * k + cout;
    };
    const std::int64_t base = cfg.base_channels;
    std::vector<std::int64_t> w;
    for (int k = 0; k < cfg.levels; ++k) w.push_back(base << k);

    auto unet_body = [&](void) {
        std::int64_t n = conv(3, w[0], 3);                       // stem
        for (int k = 0; k < cfg.levels; ++k) n += 2 * conv(w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k)], 3);  // encoder CUs
        for (int k = 0; k + 1 < cfg.levels; ++k) {
            n += conv(w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k + 1)], 3);      // down
            n += conv(w[static_cast<std::size_t>(k + 1)], w[static_cast<std::size_t>(k)], 3);      // up
            n += conv(2 * w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k)], 3);      // fuse
            n += 2 * conv(w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k)], 3);      // decoder CU
        }
        return n;
    };
    std::int64_t total = unet_body() + 2 * w[0] + conv(w[0], 3, 3);  // illum U-Net + head LN + head
    total += unet_body();                                 // reflection U-Net

    if (cfg.ablations.isdm) {
        auto mod_unit = [&](std::int64_t c) {
            const std::int64_t h = static_cast<std::int64_t>(std::floor(2.66 * static_cast<double>(c) + 0.5));
            std::int64_t n = 2 * (2 * c);            // two channel LayerNorms
            n += 2 * conv(c, c, 3, c);               // two depth-wise convs
            n += conv(c, c, 1);                      // value
            n += conv(c, 2 * h, 1);                  // ffn in
            n += conv(2 * h, 2 * h, 3, 2 * h);       // ffn depth-wise
            n += conv(h, c, 1);                      // ffn out
            return n;
        };
        for (int k = 0; k < cfg.levels; ++k) {
            const std::int64_t c = w[static_cast<std::size_t>(k)];
            if (cfg.ablations.imu) total += mod_unit(c);
            if (cfg.ablations.smu) total += mod_unit(c) + conv(c, c, 1);  // + semantic projection
        }
        // semantic encoder params are frozen, not counted as trainable
    }

    if (cfg.ablations.rsmu) {
        const std::int64_t c = base;
        const std::int64_t cr = std::max<std::int64_t>(c / 8, 4);
        auto skff = [&]() { return conv(c, cr, 1) + 3 * conv(cr, c, 1); };
        auto stage = [&]() {
            std::int64_t n = conv(c, c, 3) + conv(c, 4 * c, 3) + conv(c, 16 * c, 3);
            if (cfg.ablations.fsi) n += 4 * conv(c, c, 3) + 3 * skff();
            return n;
        };
        total += (cfg.scale == 2 ? 1 : 2) * stage();
    }
    total += 2 * base + conv(base, 3, 3);  // projection LN + projection
    total += conv(3, 3, 1);     // residual projection
    // perceptual extractor is frozen, not counted
    return total;
}

std::vector<pipeline::LoadedPair> tiny_dataset(int count = 2, std::int64_t size = 16, int scale = 2) {
    std::vector<pipeline::LoadedPair> data;
    for (int i = 0; i < count; ++i) {
        auto pair = image::make_synthetic_pair(500 + static_cast<unsigned>(i), -2.0, scale, {size, size});
        data.push_back({pair.low.data, pair.ref.data});
    }
    return data;
}

}  // namespace

TEST(BuildModelTest, SeededBuildIsBitDeterministic) {
    ModelConfig cfg;
    cfg.seed = 3;
    Model a = Model::build(cfg);
    Model b = Model::build(cfg);
    ASSERT_EQ(a.params.size(), b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        EXPECT_EQ(a.params.at(static_cast<int>(i)).name, b.params.at(static_cast<int>(i)).name);
        EXPECT_EQ(ubmtest::max_abs_diff(a.params.at(static_cast<int>(i)).value,
                                        b.params.at(static_cast<int>(i)).value),
                  0.0);
    }
}

TEST(BuildModelTest, IsdmAblationRemovesModulationParams) {
    ModelConfig cfg;
    cfg.ablations.isdm = false;
    cfg.ablations.imu = false;
    cfg.ablations.smu = false;
    Model m = Model::build(cfg);
    for (const auto& p : m.params.all()) {
        EXPECT_EQ(p.name.find("isdm"), std::string::npos) << p.name;
        EXPECT_EQ(p.name.find("semantic"), std::string::npos) << p.name;
    }
}

TEST(BuildModelTest, SmuWithoutIsdmIsConfigError) {
    ModelConfig cfg;
    cfg.ablations.isdm = false;
    cfg.ablations.imu = false;
    cfg.ablations.smu = true;
    EXPECT_THROW(Model::build(cfg), ConfigError);
}

TEST(BuildModelTest, ParamCountMatchesOracleAndGoldenFile) {
    ModelConfig cfg;  // defaults: scale 2, base 16
    Model m = Model::build(cfg);
    const std::int64_t oracle = expected_param_count(cfg);
    EXPECT_EQ(m.num_params(true), oracle);

    std::ifstream golden(std::string(UBM_SOURCE_DIR) + "/tests/golden/param_count.txt");
    ASSERT_TRUE(golden.is_open()) << "missing golden file";
    std::int64_t pinned = 0;
    golden >> pinned;
    EXPECT_EQ(m.num_params(true), pinned);

    // Scale-4 adds one more RSMU stage.
    ModelConfig cfg4 = cfg;
    cfg4.scale = 4;
    EXPECT_EQ(Model::build(cfg4).num_params(true), expected_param_count(cfg4));
}

TEST(ForwardTest, ScaleAndBatchContracts) {
    {
        ModelConfig cfg;
        Model m = Model::build(cfg);
        Graph g;
        nn::Binder bind(g, m.params, false);
        Rng rng(1);
        auto fwd = m.forward(bind, ubmtest::random_tensor(rng, {1, 3, 64, 64}, 0.0, 1.0));
        EXPECT_EQ(g.val(fwd.y_ns).shape(), (std::vector<std::int64_t>{1, 3, 128, 128}));
        EXPECT_EQ(g.val(fwd.u_nl).shape(), (std::vector<std::int64_t>{1, 3, 64, 64}));
        EXPECT_EQ(g.val(fwd.v_nl).shape(), (std::vector<std::int64_t>{1, 3, 64, 64}));
    }
    {
        ModelConfig cfg;
        cfg.scale = 4;
        Model m = Model::build(cfg);
        Graph g;
        nn::Binder bind(g, m.params, false);
        Rng rng(2);
        auto fwd = m.forward(bind, ubmtest::random_tensor(rng, {2, 3, 32, 32}, 0.0, 1.0));
        EXPECT_EQ(g.val(fwd.y_ns).shape(), (std::vector<std::int64_t>{2, 3, 128, 128}));
    }
}

TEST(ForwardTest, DegenerateInputsStayFinite) {
    ModelConfig cfg;
    Model m = Model::build(cfg);
    for (Scalar fill : {0.0, 1.0}) {
        Graph g;
        nn::Binder bind(g, m.params, false);
        auto fwd = m.forward(bind, Tensor::full({1, 3, 16, 16}, fill));
        EXPECT_TRUE(g.val(fwd.u_nl).all_finite());
        EXPECT_TRUE(g.val(fwd.v_nl).all_finite());
        EXPECT_TRUE(g.val(fwd.y_ns).all_finite());
        EXPECT_GE(g.val(fwd.y_ns).min(), 0.0);
        EXPECT_LE(g.val(fwd.y_ns).max(), 1.0);
    }
}

TEST(ForwardTest, SemanticEncoderPerturbationMovesOutputOnlyWithIsdm) {
    ModelConfig cfg;
    cfg.seed = 5;
    Model m = Model::build(cfg);
    Rng rng(3);
    // At init the modulation FFN projections are zero (identity units),
    // which also blocks semantic influence; emulate a trained state.
    for (auto& p : m.params.all())
        if (p.name.find("ffn_out") != std::string::npos)
            for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value[i] = rng.normal(0.0, 0.05);
    const Tensor x = ubmtest::random_tensor(rng, {1, 3, 16, 16}, 0.05, 0.95);
    Tensor before;
    {
        Graph g;
        nn::Binder bind(g, m.params, false);
        before = g.val(m.forward(bind, x).y_ns).clone();
    }
    // Poke a frozen semantic weight: with ISDM on the output must react.
    for (auto& p : m.params.all())
        if (p.name.rfind("semantic.s1", 0) == 0 && p.name.ends_with(".w")) {
            for (std::int64_t i = 0; i < p.value.numel(); ++i) p.value[i] += 0.05;
            break;
        }
    Graph g;
    nn::Binder bind(g, m.params, false);
    const Tensor after = g.val(m.forward(bind, x).y_ns).clone();
    EXPECT_GT(ubmtest::max_abs_diff(before, after), 1e-12);
}

TEST(TrainStepTest, ZeroLearningRateKeepsParamsBitExact) {
    ModelConfig cfg;
    auto state = pipeline::TrainState::fresh(cfg);
    auto data = tiny_dataset();
    std::vector<Tensor> before;
    for (const auto& p : state.model->params.all()) before.push_back(p.value.clone());
    Tensor low, ref;
    pipeline::sample_batch(data, {2, 16, 1}, cfg.scale, state.rng, low, ref);
    pipeline::train_step(state, low, ref, {}, /*lr=*/0.0);
    std::size_t i = 0;
    for (const auto& p : state.model->params.all())
        EXPECT_EQ(ubmtest::max_abs_diff(p.value, before[i++]), 0.0) << p.name;
}

TEST(TrainStepTest, GradientOfTotalLossMatchesFiniteDifferences) {
    ModelConfig cfg;
    cfg.seed = 11;
    Model m = Model::build(cfg);
    auto data = tiny_dataset(2, 16);
    Rng rng(7);
    ubmtest::perturb_params(m.params, rng, 0.02);  // generic point, off the kink set
    Tensor low({2, 3, 16, 16}), ref({2, 3, 32, 32});
    pipeline::StageSpec stage{2, 16, 1};
    Rng srng(8);
    pipeline::sample_batch(data, stage, 2, srng, low, ref);
    const Tensor gray = image::rgb_to_gray(low);
    auto loss_fn = [&](Graph& g, nn::Binder& bind) {
        auto fwd = m.forward(bind, low);
        Var l_sl = losses::luminance_loss(g, fwd.v_nl);
        Var l_is = losses::illum_smooth_loss(g, fwd.u_nl, g.constant(gray));
        Var l_r = losses::recon_loss(g, fwd.y_ns, g.constant(ref));
        Var l_p = losses::perceptual_loss(bind, m.perceptual, fwd.y_ns, g.constant(ref));
        return losses::total_loss(g, l_sl, l_is, l_r, l_p, m.cfg.loss_weights);
    };
    // Probe one element of every 20th parameter tensor to keep runtime sane.
    m.params.zero_grads();
    {
        Graph g;
        nn::Binder bind(g, m.params, true);
        Var loss = loss_fn(g, bind);
        g.backward(loss);
        bind.pull_grads();
    }
    auto eval = [&]() {
        Graph g;
        nn::Binder bind(g, m.params, false);
        return g.val(loss_fn(g, bind))[0];
    };
    Rng probe(99);
    Scalar worst = 0;
    int checked = 0;
    for (std::size_t pi = 0; pi < m.params.size(); pi += 20) {
        auto& p = m.params.at(static_cast<int>(pi));
        if (!p.trainable) continue;
        const std::int64_t j = probe.uniform_int(p.value.numel());
        const Scalar keep = p.value[j];
        const Scalar h = 1e-4;
        p.value[j] = keep + h;
        const Scalar fp = eval();
        p.value[j] = keep - h;
        const Scalar fm = eval();
        p.value[j] = keep;
        const Scalar fd = (fp - fm) / (2 * h);
        const Scalar an = p.grad[j];
        const Scalar rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), Scalar(1e-6)});
        worst = std::max(worst, rel);
        ++checked;
    }
    EXPECT_GT(checked, 5);
    EXPECT_LT(worst, 1e-2);
}

TEST(TrainStepTest, FrozenEncodersUntouchedByTraining) {
    ModelConfig cfg;
    cfg.seed = 6;
    auto state = pipeline::TrainState::fresh(cfg);
    auto data = tiny_dataset(2, 16);
    std::vector<std::pair<std::string, Tensor>> frozen_before;
    for (const auto& p : state.model->params.all())
        if (!p.trainable) frozen_before.emplace_back(p.name, p.value.clone());
    ASSERT_FALSE(frozen_before.empty());

    pipeline::TrainOptions opts;
    opts.schedule = {{2, 16, 10}};
    opts.adam.lr_initial = 1e-3;
    pipeline::train(state, data, opts);

    std::size_t i = 0;
    for (const auto& p : state.model->params.all())
        if (!p.trainable) {
            EXPECT_EQ(ubmtest::max_abs_diff(p.value, frozen_before[i].second), 0.0) << p.name;
            ++i;
        }
}

TEST(TrainStepTest, ScaleFourStepStaysFinite) {
    ModelConfig cfg;
    cfg.scale = 4;
    cfg.seed = 2;
    auto state = pipeline::TrainState::fresh(cfg);
    auto data = tiny_dataset(1, 32, 4);  // scale 4 needs sizes divisible by 32
    Tensor low, ref;
    pipeline::sample_batch(data, {1, 16, 1}, 4, state.rng, low, ref);
    ASSERT_EQ(ref.shape(), (std::vector<std::int64_t>{1, 3, 64, 64}));
    nn::AdamConfig adam;
    adam.lr_initial = 1e-3;
    const auto rec = pipeline::train_step(state, low, ref, adam, 1e-3);
    EXPECT_TRUE(std::isfinite(rec.total));
    EXPECT_EQ(state.iter, 1);
}

TEST(ScheduleTest, StageBoundariesAndTotals) {
    pipeline::Schedule s{{8, 32, 10}, {4, 48, 5}, {2, 64, 5}};
    EXPECT_EQ(pipeline::schedule_total(s), 20);
    EXPECT_EQ(pipeline::stage_of(s, 0), 0);
    EXPECT_EQ(pipeline::stage_of(s, 9), 0);
    EXPECT_EQ(pipeline::stage_of(s, 10), 1);  // exact boundary
    EXPECT_EQ(pipeline::stage_of(s, 14), 1);
    EXPECT_EQ(pipeline::stage_of(s, 15), 2);
    EXPECT_EQ(pipeline::stage_of(s, 19), 2);

    const auto paper = pipeline::paper_schedule();
    ASSERT_EQ(paper.size(), 6u);
    EXPECT_EQ(paper[0].batch_size, 8);
    EXPECT_EQ(paper[1].batch_size, 5);
    EXPECT_EQ(paper[5].batch_size, 1);
    EXPECT_EQ(pipeline::schedule_total(paper), 150000);
}

TEST(TrainLoopTest, DeterministicRunsAndStageSwitch) {
    auto data = tiny_dataset(2, 16);
    pipeline::TrainOptions opts;
    opts.schedule = {{2, 16, 4}, {1, 16, 3}};
    opts.ckpt_every = 0;
    auto run = [&]() {
        ModelConfig cfg;
        cfg.seed = 21;
        auto state = pipeline::TrainState::fresh(cfg);
        return pipeline::train(state, data, opts);
    };
    const auto a = run();
    const auto b = run();
    ASSERT_EQ(a.size(), 7u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].total, b[i].total) << "iter " << i;  // bit-exact reruns
        EXPECT_EQ(a[i].stage, i < 4 ? 0 : 1);
    }
}

TEST(CheckpointTest, ResumeReproducesUnbrokenRunBitExact) {
    auto data = tiny_dataset(2, 16);
    ModelConfig cfg;
    cfg.seed = 31;
    const auto dir = test_dir("ckpt");

    pipeline::TrainOptions opts;
    opts.schedule = {{2, 16, 12}};
    opts.ckpt_every = 0;

    // Unbroken run.
    auto unbroken_state = pipeline::TrainState::fresh(cfg);
    const auto unbroken = pipeline::train(unbroken_state, data, opts);

    // Broken run: same schedule, paused at iter 5, checkpoint, reload, continue.
    pipeline::TrainOptions first_half = opts;
    first_half.stop_after = 5;
    auto state = pipeline::TrainState::fresh(cfg);
    pipeline::train(state, data, first_half);
    const std::string ck = (dir / "mid.ubmc").string();
    pipeline::save_checkpoint(ck, state);

    auto resumed = pipeline::load_checkpoint(ck);
    EXPECT_EQ(resumed.iter, 5);
    const auto rest = pipeline::train(resumed, data, opts);
    ASSERT_EQ(rest.size(), 7u);
    for (std::size_t i = 0; i < rest.size(); ++i) {
        EXPECT_EQ(rest[i].total, unbroken[5 + i].total) << "iter " << rest[i].iter;
        EXPECT_EQ(rest[i].l_r, unbroken[5 + i].l_r);
    }
}

TEST(CheckpointTest, ConfigHashMismatchIsRejected) {
    ModelConfig cfg;
    auto state = pipeline::TrainState::fresh(cfg);
    const auto dir = test_dir("ckpt_hash");
    const std::string ck = (dir / "a.ubmc").string();
    pipeline::save_checkpoint(ck, state);
    auto loaded = pipeline::load_checkpoint(ck);  // sanity
    EXPECT_EQ(loaded.cfg.hash(), cfg.hash());

    // Corrupt the stored config hash field (bytes 12..19).
    std::fstream f(ck, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(12);
    const std::uint64_t junk = 0xdeadbeef;
    f.write(reinterpret_cast<const char*>(&junk), 8);
    f.close();
    EXPECT_THROW(pipeline::load_checkpoint(ck), ValidationError);
}

TEST(EvaluateTest, ReportShapeAndAggregates) {
    const auto dir = test_dir("eval");
    // Two tiny pairs on disk + manifest.
    std::vector<image::PairEntry> entries;
    for (int i = 0; i < 2; ++i) {
        auto pair = image::make_synthetic_pair(900 + static_cast<unsigned>(i), -1.5, 2, {16, 16});
        image::ImageTensor low{pair.low.data}, ref{pair.ref.data};
        const std::string lp = (dir / ("low" + std::to_string(i) + ".png")).string();
        const std::string rp = (dir / ("ref" + std::to_string(i) + ".png")).string();
        image::save_image(lp, low);
        image::save_image(rp, ref);
        entries.push_back({lp, rp, 2, -1.5});
    }
    image::save_manifest((dir / "m.json").string(), entries, false);
    const auto manifest = image::load_manifest((dir / "m.json").string());

    ModelConfig cfg;
    Model m = Model::build(cfg);
    const auto report = pipeline::evaluate(m, manifest);
    ASSERT_EQ(report.rows.size(), 2u);
    EXPECT_FALSE(report.has_niqe);
    for (const auto& r : report.rows) {
        EXPECT_TRUE(std::isfinite(r.psnr));
        EXPECT_TRUE(std::isfinite(r.ssim));
        EXPECT_TRUE(std::isfinite(r.lpips));
        EXPECT_TRUE(std::isfinite(r.loe));
    }
    const auto agg = report.aggregate();
    EXPECT_NEAR(agg.psnr, (report.rows[0].psnr + report.rows[1].psnr) / 2.0, 1e-9);

    // Scale mismatch rejected.
    ModelConfig cfg4;
    cfg4.scale = 4;
    Model m4 = Model::build(cfg4);
    EXPECT_THROW(pipeline::evaluate(m4, manifest), ValidationError);
}

TEST(InferTest, PadAndCropRestoresExactOutputSize) {
    ModelConfig cfg;
    Model m = Model::build(cfg);
    Rng rng(9);
    const Tensor odd = ubmtest::random_tensor(rng, {1, 3, 17, 15}, 0.0, 1.0);
    const Tensor y = pipeline::infer_image(m, odd);
    EXPECT_EQ(y.shape(), (std::vector<std::int64_t>{1, 3, 34, 30}));

    const Tensor even = ubmtest::random_tensor(rng, {1, 3, 16, 16}, 0.0, 1.0);
    EXPECT_EQ(pipeline::infer_image(m, even).shape(), (std::vector<std::int64_t>{1, 3, 32, 32}));
}

TEST(TrainLoopTest, ShortOverfitReducesLoss) {
    auto data = tiny_dataset(2, 16);
    ModelConfig cfg;
    cfg.seed = 41;
    auto state = pipeline::TrainState::fresh(cfg);
    pipeline::TrainOptions opts;
    opts.schedule = {{2, 16, 30}};
    opts.adam.lr_initial = 1e-3;
    const auto recs = pipeline::train(state, data, opts);
    ASSERT_EQ(recs.size(), 30u);
    // Average of the last 5 iterations sits below the first iteration.
    Scalar tail = 0;
    for (std::size_t i = recs.size() - 5; i < recs.size(); ++i) tail += recs[i].total;
    tail /= 5;
    EXPECT_LT(tail, recs.front().total);
}
