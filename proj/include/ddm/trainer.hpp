#pragma once

// End-to-end unsupervised training: one (t, eps) draw per pair, composite
// loss, hand-written backward through warp and both networks, Adam update.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddm/diffusion_schedule.hpp"
#include "ddm/field_ops.hpp"
#include "ddm/losses_metrics.hpp"
#include "ddm/networks.hpp"
#include "ddm/optim.hpp"

namespace ddm {

struct TrainConfig {
    double lambda = 20.0;
    double lambda_r = 1.0;
    double lr = 2e-4;
    int epochs = 800;
    int batch_size = 1;
    int diffusion_steps = 2000;
    double beta_min = 1e-6;
    double beta_max = 1e-2;
    int ncc_window = kDefaultNccWindow;
    std::uint64_t seed = 0;
    int checkpoint_every = 100;
    double grad_clip = 0.0;  // global-norm clipping; 0 disables

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lambda", c.lambda},
                       {"lambda_r", c.lambda_r},
                       {"lr", c.lr},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"diffusion_steps", c.diffusion_steps},
                       {"beta_min", c.beta_min},
                       {"beta_max", c.beta_max},
                       {"ncc_window", c.ncc_window},
                       {"seed", c.seed},
                       {"checkpoint_every", c.checkpoint_every},
                       {"grad_clip", c.grad_clip}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    require_known_keys(j,
                       {"lambda", "lambda_r", "lr", "epochs", "batch_size", "diffusion_steps", "beta_min", "beta_max",
                        "ncc_window", "seed", "checkpoint_every", "grad_clip"},
                       "train config");
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("lambda", c.lambda);
    get("lambda_r", c.lambda_r);
    get("lr", c.lr);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("diffusion_steps", c.diffusion_steps);
    get("beta_min", c.beta_min);
    get("beta_max", c.beta_max);
    get("ncc_window", c.ncc_window);
    get("seed", c.seed);
    get("checkpoint_every", c.checkpoint_every);
    get("grad_clip", c.grad_clip);
}

inline void validate(const TrainConfig& c) {
    require(c.lambda >= 0.0, "lambda must be non-negative");
    require(c.lambda_r >= 0.0, "lambda_r must be non-negative");
    require(c.lr > 0.0, "lr must be positive");
    require(c.epochs >= 1, "epochs must be positive");
    require(c.batch_size >= 1, "batch_size must be positive");
    require(c.diffusion_steps >= 1, "diffusion_steps must be positive");
    require(c.ncc_window >= 1 && c.ncc_window % 2 == 1, "ncc_window must be a positive odd integer");
    require(c.checkpoint_every >= 1, "checkpoint_every must be positive");
    require(c.grad_clip >= 0.0, "grad_clip must be non-negative");
}

/// Largest odd window not exceeding the requested size or any axis extent.
inline int effective_ncc_window(int requested, const Shape3& s) {
    int w = std::min({requested, s.d, s.h, s.w});
    if (w % 2 == 0) --w;
    return std::max(w, 1);
}

/// Raised when a step produces a non-finite loss or gradient; the step is
/// not applied.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(std::string component)
        : std::runtime_error("non-finite value in " + component + "; step aborted"), component_(std::move(component)) {}
    const std::string& component() const { return component_; }

private:
    std::string component_;
};

/// Weights, optimizer and RNG: everything that evolves during training.
struct TrainState {
    ModelWeights weights;
    Adam optimizer;
    std::mt19937_64 rng;
    int epoch = 0;
};

inline constexpr std::uint64_t kTrainRngSalt = 0x9E3779B97F4A7C15ull;

inline TrainState make_train_state(const NetworkConfig& net, const TrainConfig& cfg) {
    validate(cfg);
    return TrainState{build_networks(net, cfg.seed), Adam(AdamConfig{cfg.lr}), std::mt19937_64(cfg.seed ^ kTrainRngSalt),
                      0};
}

struct TrainingPair {
    const Volume* source;
    const Volume* target;
};

namespace detail {

inline void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NonFiniteError(what);
}

/// Forward + backward for one pair; accumulates parameter gradients scaled by
/// `weight` and returns the unscaled loss breakdown.
inline LossBreakdown accumulate_pair(ModelWeights& w, const TrainingPair& pair, const NoiseSchedule& schedule,
                                     const LossWeights& lw, std::mt19937_64& rng, double weight) {
    const Volume& S = *pair.source;
    const Volume& T = *pair.target;
    require_same_shape(S.shape(), T.shape(), "train_step");

    UNet3d::Cache dcache, fcache;
    Volume code, noise;
    DisplacementField field;
    if (w.has_diffusion()) {
        const int t = sample_timestep(schedule.steps(), rng);
        noise = standard_normal(T.shape(), rng);
        const Volume x_t = perturb(T, t, noise, schedule);
        code = Volume(w.diffusion().forward(stack_channels({&S, &T, &x_t}), t, dcache), S.spacing);
        field = to_field(w.deformation().forward(stack_channels({&S, &code}), 0, fcache));
    } else {
        field = to_field(w.deformation().forward(stack_channels({&S, &T}), 0, fcache));
    }
    if (!all_finite(field.data)) throw NonFiniteError("deformation field");
    const Volume warped = warp_trilinear(S, field);

    LossGradients g = total_loss_grad(w.has_diffusion() ? &code : nullptr, w.has_diffusion() ? &noise : nullptr,
                                      warped, T, field, lw);
    check_finite(g.loss.diffuse, "diffusion loss");
    check_finite(g.loss.deform_similarity, "similarity loss");
    check_finite(g.loss.deform_smooth, "smoothness loss");
    check_finite(g.loss.total, "total loss");

    WarpGradients wg = warp_trilinear_vjp(S, field, g.d_warped.data);
    Tensor d_field = g.d_field.data;
    for (std::size_t n = 0; n < d_field.size(); ++n) d_field[n] = weight * (d_field[n] + wg.d_field.data[n]);

    Tensor d_in = w.deformation().backward(fcache, d_field, w.has_diffusion());
    if (w.has_diffusion()) {
        auto [d_src, d_code] = nn::split_channels(d_in, 1);
        for (std::size_t n = 0; n < d_code.size(); ++n) d_code[n] += weight * g.d_code[n];
        w.diffusion().backward(dcache, d_code, false);
    }
    return g.loss;
}

inline void apply_update(TrainState& st, const TrainConfig& cfg) {
    auto params = st.weights.params();
    for (auto* p : params)
        for (double gv : p->grad)
            if (!std::isfinite(gv)) throw NonFiniteError("gradient of " + p->name);
    if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
    st.optimizer.step(params);
    for (auto* p : params)
        for (double v : p->value)
            if (!std::isfinite(v)) throw NonFiniteError("parameter " + p->name);
}

}  // namespace detail

inline LossWeights loss_weights(const TrainConfig& cfg, const Shape3& shape) {
    return LossWeights{cfg.lambda, cfg.lambda_r, effective_ncc_window(cfg.ncc_window, shape)};
}

/// One optimizer update over a batch of pairs (gradients averaged). Returns the
/// mean pre-update loss breakdown. On a non-finite loss or gradient the
/// weights are left untouched and NonFiniteError is thrown.
inline LossBreakdown train_batch(TrainState& st, const std::vector<TrainingPair>& batch, const NoiseSchedule& schedule,
                                 const TrainConfig& cfg) {
    require(!batch.empty(), "train_batch: empty batch");
    const LossWeights lw = loss_weights(cfg, batch.front().source->shape());
    st.weights.zero_grad();
    LossBreakdown mean;
    const double wgt = 1.0 / static_cast<double>(batch.size());
    for (const auto& pair : batch) {
        const LossBreakdown b = detail::accumulate_pair(st.weights, pair, schedule, lw, st.rng, wgt);
        mean.diffuse += wgt * b.diffuse;
        mean.deform_similarity += wgt * b.deform_similarity;
        mean.deform_smooth += wgt * b.deform_smooth;
        mean.total += wgt * b.total;
    }
    detail::apply_update(st, cfg);
    return mean;
}

inline LossBreakdown train_step(TrainState& st, const Volume& source, const Volume& target,
                                const NoiseSchedule& schedule, const TrainConfig& cfg) {
    return train_batch(st, {TrainingPair{&source, &target}}, schedule, cfg);
}

inline NoiseSchedule schedule_for(const TrainConfig& cfg) {
    return make_linear_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max);
}

struct EpochRecord {
    int epoch = 0;
    LossBreakdown loss;
    double wall_time = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
    return nlohmann::json{{"epoch", r.epoch},
                          {"diffuse", r.loss.diffuse},
                          {"deform_similarity", r.loss.deform_similarity},
                          {"deform_smooth", r.loss.deform_smooth},
                          {"total", r.loss.total},
                          {"wall_time", r.wall_time}};
}

struct FitOptions {
    /// Called after every epoch that should be checkpointed (every
    /// checkpoint_every epochs and after the last one).
    std::function<void(const TrainState&)> checkpoint;
    /// Called with each epoch's record (e.g. to append a log line).
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
    std::vector<EpochRecord> log;
    bool aborted = false;
    std::string abort_reason;
};

/// Epochs x subject batches of train_batch. Stops at the first non-finite
/// step; the state then holds the last good weights (the failed step is never
/// applied) and the most recent checkpoint stays on disk.
inline FitResult fit(TrainState& st, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                     const FitOptions& opts = {}) {
    require(!pairs.empty(), "fit: dataset is empty");
    validate(cfg);
    const NoiseSchedule schedule = schedule_for(cfg);
    FitResult result;
    for (int e = 0; e < cfg.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.epoch = st.epoch + 1;
        int batches = 0;
        try {
            for (std::size_t b = 0; b < pairs.size(); b += cfg.batch_size) {
                std::vector<TrainingPair> batch(pairs.begin() + b,
                                                pairs.begin() + std::min(pairs.size(), b + cfg.batch_size));
                const LossBreakdown l = train_batch(st, batch, schedule, cfg);
                rec.loss.diffuse += l.diffuse;
                rec.loss.deform_similarity += l.deform_similarity;
                rec.loss.deform_smooth += l.deform_smooth;
                rec.loss.total += l.total;
                ++batches;
            }
        } catch (const NonFiniteError& err) {
            result.aborted = true;
            result.abort_reason = err.what();
            return result;
        }
        rec.loss.diffuse /= batches;
        rec.loss.deform_similarity /= batches;
        rec.loss.deform_smooth /= batches;
        rec.loss.total /= batches;
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++st.epoch;
        result.log.push_back(rec);
        if (opts.on_epoch) opts.on_epoch(rec);
        const bool last = e + 1 == cfg.epochs;
        if (opts.checkpoint && (last || st.epoch % cfg.checkpoint_every == 0)) opts.checkpoint(st);
    }
    return result;
}

/// Loss of a fixed (t, eps) draw without touching the weights.
inline LossBreakdown evaluate_loss(const ModelWeights& w, const Volume& source, const Volume& target, int t,
                                   const Volume& noise, const NoiseSchedule& schedule, const LossWeights& lw) {
    DisplacementField field;
    Volume code;
    if (w.has_diffusion()) {
        const Volume x_t = perturb(target, t, noise, schedule);
        code = diffusion_forward(w, source, target, x_t, t);
        field = deformation_forward(w, source, code);
    } else {
        field = deformation_forward(w, source, target);
    }
    const Volume warped = warp_trilinear(source, field);
    if (!w.has_diffusion()) {
        LossBreakdown b;
        b.deform_similarity = -local_ncc(warped, target, lw.ncc_window);
        b.deform_smooth = smoothness_penalty(field);
        b.total = lw.lambda * (b.deform_similarity + lw.lambda_r * b.deform_smooth);
        return b;
    }
    return total_loss(code, noise, warped, target, field, lw);
}

}  // namespace ddm
