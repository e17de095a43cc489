#pragma once

// Inference: estimate the latent code once from the clean pair, then produce
// intermediate frames by scaling the code (or, for the direct-registration
// baseline, by scaling the field itself).

#include <concepts>
#include <vector>

#include "ddm/field_ops.hpp"
#include "ddm/networks.hpp"

namespace ddm {

/// Anything that can produce a latent code for a pair and a field for a
/// (source, code) input.
template <class M>
concept LatentDeformer = requires(const M& m, const Volume& v, const LatentCode& c) {
    { m.estimate_latent(v, v) } -> std::convertible_to<LatentCode>;
    { m.deform(v, c) } -> std::convertible_to<DisplacementField>;
};

/// Adapter exposing trained DDM weights through LatentDeformer.
struct DdmModel {
    const ModelWeights& weights;

    /// Clean target as the noisy input at timestep 0.
    LatentCode estimate_latent(const Volume& source, const Volume& target) const {
        require_same_shape(source.shape(), target.shape(), "estimate_latent");
        return diffusion_forward(weights, source, target, target, 0);
    }
    DisplacementField deform(const Volume& source, const LatentCode& code) const {
        return deformation_forward(weights, source, code);
    }
};

inline LatentCode estimate_latent(const ModelWeights& w, const Volume& source, const Volume& target) {
    return DdmModel{w}.estimate_latent(source, target);
}

struct Frame {
    double gamma = 0.0;
    DisplacementField field;
    Volume image;
};

inline void check_gamma(double gamma) {
    require(gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1], got " + std::to_string(gamma));
}

template <LatentDeformer M>
Frame generate_frame(const M& model, const Volume& source, const LatentCode& code, double gamma) {
    check_gamma(gamma);
    require_same_shape(source.shape(), code.shape(), "generate_frame");
    LatentCode scaled = code;
    for (double& v : scaled.data.values()) v *= gamma;
    Frame f{gamma, model.deform(source, scaled), {}};
    f.image = warp_trilinear(source, f.field);
    return f;
}

inline Frame generate_frame(const ModelWeights& w, const Volume& source, const LatentCode& code, double gamma) {
    return generate_frame(DdmModel{w}, source, code, gamma);
}

/// gamma_k = k / (n - 1), k = 0..n-1.
inline std::vector<double> gamma_grid(int n_frames) {
    require(n_frames >= 2, "frame count must be at least 2");
    std::vector<double> g(n_frames);
    for (int k = 0; k < n_frames; ++k) g[k] = static_cast<double>(k) / (n_frames - 1);
    g.back() = 1.0;
    return g;
}

struct Sequence {
    LatentCode latent;
    std::vector<Frame> frames;
};

/// One latent estimate, then one frame per point of the uniform gamma grid.
template <LatentDeformer M>
Sequence generate_sequence(const M& model, const Volume& source, const Volume& target, int n_frames) {
    const auto gammas = gamma_grid(n_frames);
    Sequence seq{model.estimate_latent(source, target), {}};
    seq.frames.reserve(gammas.size());
    for (double g : gammas) seq.frames.push_back(generate_frame(model, source, seq.latent, g));
    return seq;
}

inline Sequence generate_sequence(const ModelWeights& w, const Volume& source, const Volume& target, int n_frames) {
    return generate_sequence(DdmModel{w}, source, target, n_frames);
}

/// Direct-registration baseline: one field from (S, T), frames warp S by
/// gamma * field.
inline std::vector<Frame> baseline_scaled_sequence(const ModelWeights& direct, const Volume& source,
                                                   const Volume& target, int n_frames) {
    require(direct.config().mode == ModelMode::Direct, "baseline_scaled_sequence: model is not a direct-mode model");
    const auto gammas = gamma_grid(n_frames);
    const DisplacementField full = deformation_forward(direct, source, target);
    std::vector<Frame> frames;
    frames.reserve(gammas.size());
    for (double g : gammas) {
        Frame f{g, scale_field(full, g), {}};
        f.image = warp_trilinear(source, f.field);
        frames.push_back(std::move(f));
    }
    return frames;
}

}  // namespace ddm
