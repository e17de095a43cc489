#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ddm/checkpoint.hpp"
#include "ddm/data_pipeline.hpp"
#include "ddm/trainer.hpp"
#include "oracles.hpp"

using namespace ddm;
namespace fs = std::filesystem;

namespace {

NetworkConfig small_net(Shape3 shape = {16, 16, 8}) {
    NetworkConfig c;
    c.image_shape = shape;
    c.diffusion_channels = {4, 8, 8};
    c.deform_encoder = {4, 8, 8};
    c.deform_decoder = {8, 8};
    c.deform_extra = {4};
    c.time_embed_dim = 8;
    return c;
}

TrainConfig small_train(std::uint64_t seed = 1) {
    TrainConfig t;
    t.seed = seed;
    t.ncc_window = 5;
    t.epochs = 1;
    return t;
}

fs::path temp_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("ddm_trainer_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
    const TrainConfig c;
    EXPECT_EQ(c.lambda, 20.0);
    EXPECT_EQ(c.lambda_r, 1.0);
    EXPECT_EQ(c.lr, 2e-4);
    EXPECT_EQ(c.epochs, 800);
    EXPECT_EQ(c.batch_size, 1);
    EXPECT_EQ(c.diffusion_steps, 2000);
    EXPECT_EQ(c.beta_min, 1e-6);
    EXPECT_EQ(c.beta_max, 1e-2);
    EXPECT_EQ(c.grad_clip, 0.0);
    TrainConfig bad;
    bad.ncc_window = 4;
    EXPECT_THROW(validate(bad), std::invalid_argument);
    bad = TrainConfig{};
    bad.lr = 0;
    EXPECT_THROW(validate(bad), std::invalid_argument);
    const nlohmann::json j = c;
    EXPECT_EQ(j.get<TrainConfig>(), c);
}

TEST(EffectiveNccWindow, ClampsToSmallestAxis) {
    EXPECT_EQ(effective_ncc_window(9, {32, 32, 8}), 7);
    EXPECT_EQ(effective_ncc_window(9, {32, 32, 32}), 9);
    EXPECT_EQ(effective_ncc_window(5, {6, 6, 6}), 5);
}

TEST(TrainStep, LambdaZeroTotalEqualsDiffusionLoss) {
    auto cfg = small_train();
    cfg.lambda = 0.0;
    auto st = make_train_state(small_net(), cfg);
    const auto pair = make_synthetic_pair(1, {16, 16, 8}, 2.0);
    const auto l = train_step(st, pair.ed, pair.es, schedule_for(cfg), cfg);
    EXPECT_EQ(l.total, l.diffuse);
}

TEST(TrainStep, FixedSeedReproducesFirstStepBitwise) {
    const auto pair = make_synthetic_pair(2, {16, 16, 8}, 2.0);
    const auto cfg = small_train(11);
    auto a = make_train_state(small_net(), cfg), b = make_train_state(small_net(), cfg);
    const auto la = train_step(a, pair.ed, pair.es, schedule_for(cfg), cfg);
    const auto lb = train_step(b, pair.ed, pair.es, schedule_for(cfg), cfg);
    EXPECT_EQ(la.total, lb.total);
    EXPECT_EQ(la.diffuse, lb.diffuse);
    const auto pa = a.weights.params(), pb = b.weights.params();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
}

TEST(TrainStep, EveryParameterGroupReceivesGradient) {
    const auto pair = make_synthetic_pair(3, {16, 16, 8}, 2.0);
    const auto cfg = small_train();
    auto st = make_train_state(small_net(), cfg);
    // move the flow head off its near-zero start so every path carries signal
    nn::Rng rng(1);
    for (auto* p : st.weights.deformation().params())
        if (p->name.find("head") != std::string::npos) nn::init_uniform(*p, 0.05, rng);
    train_step(st, pair.ed, pair.es, schedule_for(cfg), cfg);
    for (auto* p : st.weights.params()) {
        double g = 0;
        for (double v : p->grad) g += std::abs(v);
        EXPECT_GT(g, 0.0) << p->name;
    }
}

TEST(TrainStep, NonFiniteStepIsRejectedAndNotApplied) {
    const auto pair = make_synthetic_pair(4, {16, 16, 8}, 2.0);
    const auto cfg = small_train();
    auto st = make_train_state(small_net(), cfg);
    auto params = st.weights.deformation().params();
    params.back()->value[0] = std::nan("");
    const auto before = st.weights.params().front()->value;
    EXPECT_THROW(train_step(st, pair.ed, pair.es, schedule_for(cfg), cfg), NonFiniteError);
    EXPECT_EQ(st.weights.params().front()->value, before);
    EXPECT_EQ(st.optimizer.steps(), 0);
}

TEST(TrainStep, OverfitOnePairReducesLoss) {
    auto net = small_net({32, 32, 8});
    auto cfg = small_train(5);
    cfg.ncc_window = 7;
    auto st = make_train_state(net, cfg);
    const auto pair = make_synthetic_pair(3, {32, 32, 8}, 3.0);
    const auto sched = schedule_for(cfg);
    // fixed (t, eps) probes remove the sampling noise from the comparison
    std::mt19937_64 rng(3);
    std::vector<std::pair<int, Volume>> probes;
    for (int k = 0; k < 4; ++k) probes.emplace_back(sample_timestep(sched.steps(), rng), standard_normal(net.image_shape, rng));
    const auto lw = loss_weights(cfg, net.image_shape);
    auto probe_loss = [&] {
        double s = 0;
        for (const auto& [t, eps] : probes) s += evaluate_loss(st.weights, pair.ed, pair.es, t, eps, sched, lw).total;
        return s / probes.size();
    };
    const double first = probe_loss();
    for (int s = 0; s < 500; ++s) train_step(st, pair.ed, pair.es, sched, cfg);
    EXPECT_LT(probe_loss(), first - 0.1);
}

TEST(Fit, OneSubjectOneEpochLogsOnce) {
    const auto pair = make_synthetic_pair(6, {16, 16, 8}, 2.0);
    auto cfg = small_train();
    auto st = make_train_state(small_net(), cfg);
    int checkpoints = 0;
    FitOptions opts;
    opts.checkpoint = [&](const TrainState&) { ++checkpoints; };
    const auto r = fit(st, {{&pair.ed, &pair.es}}, cfg, opts);
    ASSERT_EQ(r.log.size(), 1u);
    EXPECT_FALSE(r.aborted);
    EXPECT_EQ(r.log[0].epoch, 1);
    EXPECT_EQ(checkpoints, 1);
    EXPECT_EQ(st.epoch, 1);
    const auto j = to_json(r.log[0]);
    for (const char* k : {"epoch", "diffuse", "deform_similarity", "deform_smooth", "total", "wall_time"})
        EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_THROW(fit(st, {}, cfg), std::invalid_argument);
}

TEST(Fit, CheckpointCadence) {
    const auto pair = make_synthetic_pair(7, {16, 16, 8}, 2.0);
    auto cfg = small_train();
    cfg.epochs = 5;
    cfg.checkpoint_every = 2;
    auto st = make_train_state(small_net(), cfg);
    std::vector<int> at;
    FitOptions opts;
    opts.checkpoint = [&](const TrainState& s) { at.push_back(s.epoch); };
    fit(st, {{&pair.ed, &pair.es}}, cfg, opts);
    EXPECT_EQ(at, (std::vector<int>{2, 4, 5}));
}

TEST(Fit, FiveSubjectsImproveOverFiftyEpochs) {
    std::vector<SubjectRecord> subjects;
    for (int k = 0; k < 5; ++k) subjects.push_back(make_synthetic_pair(20 + k, {16, 16, 8}, 2.0));
    std::vector<TrainingPair> pairs;
    for (const auto& s : subjects) pairs.push_back({&s.ed, &s.es});
    auto cfg = small_train(3);
    cfg.epochs = 50;
    auto st = make_train_state(small_net(), cfg);
    const auto r = fit(st, pairs, cfg);
    ASSERT_EQ(r.log.size(), 50u);
    EXPECT_LT(r.log.back().loss.total, r.log.front().loss.total);
}

TEST(Fit, AbortsOnNonFiniteAndKeepsState) {
    const auto pair = make_synthetic_pair(8, {16, 16, 8}, 2.0);
    auto cfg = small_train();
    cfg.epochs = 3;
    auto st = make_train_state(small_net(), cfg);
    st.weights.deformation().params().back()->value[1] = std::numeric_limits<double>::infinity();
    const auto r = fit(st, {{&pair.ed, &pair.es}}, cfg);
    EXPECT_TRUE(r.aborted);
    EXPECT_TRUE(r.log.empty());
    EXPECT_NE(r.abort_reason.find("non-finite"), std::string::npos);
}

TEST(Checkpoint, RoundTripIsBitExactAndPreservesLoss) {
    const auto dir = temp_dir("roundtrip");
    const auto pair = make_synthetic_pair(9, {16, 16, 8}, 2.0);
    const auto cfg = small_train(4);
    auto st = make_train_state(small_net(), cfg);
    const auto sched = schedule_for(cfg);
    for (int s = 0; s < 3; ++s) train_step(st, pair.ed, pair.es, sched, cfg);
    save_checkpoint(dir / "m.ckpt", st, cfg);
    const auto net = small_net();
    auto ck = load_checkpoint(dir / "m.ckpt", &net);

    const auto pa = st.weights.params(), pb = ck.state.weights.params();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    EXPECT_EQ(ck.train, cfg);
    EXPECT_EQ(ck.state.optimizer.steps(), st.optimizer.steps());

    std::mt19937_64 rng(1);
    const Volume eps = standard_normal(net.image_shape, rng);
    const auto lw = loss_weights(cfg, net.image_shape);
    const double before = evaluate_loss(st.weights, pair.ed, pair.es, 250, eps, sched, lw).total;
    const double after = evaluate_loss(ck.state.weights, pair.ed, pair.es, 250, eps, sched, lw).total;
    EXPECT_LE(rel(after, before), 1e-9);

    // resumed training continues identically (optimizer moments and RNG restored)
    const auto la = train_step(st, pair.ed, pair.es, sched, cfg);
    const auto lb = train_step(ck.state, pair.ed, pair.es, sched, cfg);
    EXPECT_EQ(la.total, lb.total);
}

TEST(Checkpoint, RejectsMismatchedConfig) {
    const auto dir = temp_dir("mismatch");
    const auto cfg = small_train();
    auto st = make_train_state(small_net(), cfg);
    save_checkpoint(dir / "m.ckpt", st, cfg);
    const auto other = small_net({32, 32, 8});
    try {
        load_checkpoint(dir / "m.ckpt", &other);
        FAIL() << "expected rejection";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("16x16x8"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("32x32x8"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, RejectsOtherFormatVersionNamingBoth) {
    const auto dir = temp_dir("version");
    const auto cfg = small_train();
    auto st = make_train_state(small_net(), cfg);
    save_checkpoint(dir / "m.ckpt", st, cfg);
    {
        std::fstream f(dir / "m.ckpt", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const std::uint32_t major = 7;
        f.write(reinterpret_cast<const char*>(&major), sizeof major);
    }
    try {
        load_checkpoint(dir / "m.ckpt");
        FAIL() << "expected rejection";
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("7.0"), std::string::npos) << msg;
        EXPECT_NE(msg.find("1.0"), std::string::npos) << msg;
    }
}

TEST(Checkpoint, RejectsTruncatedAndForeignFiles) {
    const auto dir = temp_dir("truncated");
    const auto cfg = small_train();
    auto st = make_train_state(small_net(), cfg);
    save_checkpoint(dir / "m.ckpt", st, cfg);
    fs::resize_file(dir / "m.ckpt", fs::file_size(dir / "m.ckpt") / 2);
    EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), CheckpointError);
    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), CheckpointError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
}
