#include <gtest/gtest.h>

#include "ddm/data_pipeline.hpp"
#include "ddm/generator.hpp"
#include "oracles.hpp"

using namespace ddm;

namespace {

// Field proportional to the code, so gamma scaling is observable; counts calls.
struct CountingModel {
    mutable int latent_calls = 0;
    mutable int deform_calls = 0;
    LatentCode estimate_latent(const Volume& s, const Volume& t) const {
        ++latent_calls;
        LatentCode c(s.shape());
        for (std::size_t n = 0; n < c.size(); ++n) c[n] = t[n] - s[n];
        return c;
    }
    DisplacementField deform(const Volume& s, const LatentCode& c) const {
        ++deform_calls;
        DisplacementField f(s.shape());
        for (std::size_t n = 0; n < c.size(); ++n) f.component(0)[n] = c[n] * c[n];
        return f;
    }
};
static_assert(LatentDeformer<CountingModel>);

NetworkConfig tiny(ModelMode mode) {
    NetworkConfig c;
    c.image_shape = {16, 16, 8};
    c.diffusion_channels = {2, 4};
    c.deform_encoder = {2, 4};
    c.deform_decoder = {4};
    c.deform_extra = {};
    c.time_embed_dim = 4;
    c.mode = mode;
    return c;
}

}  // namespace

TEST(GammaGrid, EvenlySpacedWithExactEndpoints) {
    const auto g = gamma_grid(5);
    EXPECT_EQ(g, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
    EXPECT_EQ(gamma_grid(2), (std::vector<double>{0.0, 1.0}));
    EXPECT_THROW(gamma_grid(1), std::invalid_argument);
}

TEST(GenerateSequence, OneLatentEstimateAndOneDeformationPerFrame) {
    const CountingModel m;
    const Volume S = oracle::random_volume({6, 6, 6}, 1), T = oracle::random_volume({6, 6, 6}, 2);
    const auto seq = generate_sequence(m, S, T, 7);
    EXPECT_EQ(m.latent_calls, 1);
    EXPECT_EQ(m.deform_calls, 7);
    ASSERT_EQ(seq.frames.size(), 7u);
    EXPECT_EQ(seq.frames.front().gamma, 0.0);
    EXPECT_EQ(seq.frames.back().gamma, 1.0);
}

TEST(GenerateSequence, FramesUseTheScaledCode) {
    const CountingModel m;
    const Volume S = oracle::random_volume({6, 6, 6}, 3), T = oracle::random_volume({6, 6, 6}, 4);
    const auto seq = generate_sequence(m, S, T, 3);
    // the model's field is quadratic in the code, so frame 1 carries a quarter of frame 2
    for (std::size_t n = 0; n < S.size(); ++n)
        ASSERT_NEAR(seq.frames[1].field.component(0)[n], 0.25 * seq.frames[2].field.component(0)[n], 1e-14);
    EXPECT_EQ(mean_abs(seq.frames[0].field.data), 0.0);
    EXPECT_LE(max_abs_diff(seq.frames[0].image.data, S.data), 1e-12);
}

TEST(GenerateFrame, RejectsGammaOutsideUnitInterval) {
    const CountingModel m;
    const Volume S = oracle::random_volume({4, 4, 4}, 5);
    const LatentCode c = m.estimate_latent(S, S);
    EXPECT_THROW(generate_frame(m, S, c, 1.2), std::invalid_argument);
    EXPECT_THROW(generate_frame(m, S, c, -0.5), std::invalid_argument);
    EXPECT_THROW(generate_frame(m, S, LatentCode({4, 4, 5}), 0.5), std::invalid_argument);
}

TEST(EstimateLatent, UsesCleanTargetAndIsDeterministic) {
    const auto w = build_networks(tiny(ModelMode::Ddm), 1);
    const auto pair = make_synthetic_pair(1, {16, 16, 8}, 2.0);
    const auto a = estimate_latent(w, pair.ed, pair.es), b = estimate_latent(w, pair.ed, pair.es);
    EXPECT_EQ(a.data, b.data);
    EXPECT_EQ(a.data, diffusion_forward(w, pair.ed, pair.es, pair.es, 0).data);
}

TEST(GenerateSequence, DdmWeightsProduceFiniteFrames) {
    const auto w = build_networks(tiny(ModelMode::Ddm), 2);
    const auto pair = make_synthetic_pair(2, {16, 16, 8}, 2.0);
    const auto seq = generate_sequence(w, pair.ed, pair.es, 4);
    ASSERT_EQ(seq.frames.size(), 4u);
    for (const auto& f : seq.frames) EXPECT_TRUE(all_finite(f.image.data));
}

TEST(BaselineScaledSequence, FieldsOnlyVaryInScale) {
    const auto w = build_networks(tiny(ModelMode::Direct), 3);
    const auto pair = make_synthetic_pair(3, {16, 16, 8}, 2.0);
    const auto frames = baseline_scaled_sequence(w, pair.ed, pair.es, 5);
    ASSERT_EQ(frames.size(), 5u);
    const auto& full = frames.back().field;
    for (std::size_t k = 1; k < frames.size(); ++k) {
        double dev = 0;
        for (std::size_t n = 0; n < full.data.size(); ++n)
            dev = std::max(dev, std::abs(frames[k].field.data[n] / frames[k].gamma - full.data[n]));
        EXPECT_LE(dev, 1e-12);
    }
    EXPECT_THROW(baseline_scaled_sequence(build_networks(tiny(ModelMode::Ddm), 3), pair.ed, pair.es, 5),
                 std::invalid_argument);
}
