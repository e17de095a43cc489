#pragma once

// Forward diffusion: linear beta schedule, cumulative alpha products, and the
// closed-form perturbation x_t = sqrt(abar_t) T + sqrt(1 - abar_t) eps.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ddm/grid.hpp"

namespace ddm {

/// Immutable beta schedule over timesteps 1..u. Timestep 0 denotes the clean
/// signal (abar_0 = 1).
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        require(!betas_.empty(), "NoiseSchedule: needs at least one step");
        alpha_bars_.reserve(betas_.size());
        double prod = 1.0;
        for (double b : betas_) {
            require(b > 0.0 && b < 1.0, "NoiseSchedule: every beta must lie in (0, 1)");
            prod *= 1.0 - b;
            alpha_bars_.push_back(prod);
        }
    }

    int steps() const { return static_cast<int>(betas_.size()); }
    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }

    double beta(int t) const {
        check(t, 1);
        return betas_[t - 1];
    }

    double alpha_bar(int t) const {
        check(t, 0);
        return t == 0 ? 1.0 : alpha_bars_[t - 1];
    }

private:
    void check(int t, int lo) const {
        if (t < lo || t > steps())
            throw std::out_of_range("NoiseSchedule: timestep " + std::to_string(t) + " outside [" +
                                    std::to_string(lo) + ", " + std::to_string(steps()) + "]");
    }

    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

inline NoiseSchedule make_linear_schedule(int steps, double beta_min, double beta_max) {
    require(steps >= 1, "make_linear_schedule: step count must be >= 1");
    require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
            "make_linear_schedule: need 0 < beta_min <= beta_max < 1");
    std::vector<double> betas(steps);
    for (int t = 0; t < steps; ++t)
        betas[t] = steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * t / static_cast<double>(steps - 1);
    betas.back() = beta_max;
    return NoiseSchedule(std::move(betas));
}

inline double alpha_bar(const NoiseSchedule& s, int t) { return s.alpha_bar(t); }

/// x_t = sqrt(abar_t) * target + sqrt(1 - abar_t) * noise. t = 0 returns target.
inline Volume perturb(const Volume& target, int t, const Volume& noise, const NoiseSchedule& s) {
    require_same_shape(target.shape(), noise.shape(), "perturb");
    const double ab = s.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Volume out = target;
    for (std::size_t n = 0; n < out.size(); ++n) out[n] = a * target[n] + b * noise[n];
    return out;
}

/// Uniform draw from {1, ..., steps}.
template <class Rng>
int sample_timestep(int steps, Rng& rng) {
    require(steps >= 1, "sample_timestep: step count must be >= 1");
    return std::uniform_int_distribution<int>(1, steps)(rng);
}

template <class Rng>
Volume standard_normal(Shape3 shape, Rng& rng) {
    Volume v(shape);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (double& x : v.data.values()) x = nd(rng);
    return v;
}

}  // namespace ddm
