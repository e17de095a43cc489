#pragma once

#include <cmath>
#include <vector>

#include "ddm/nn/layers.hpp"

namespace ddm {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed, ordered parameter list. Moment buffers follow the order
/// of the list passed to step().
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    long steps() const { return t_; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void set_steps(long t) { t_ = t; }

    void step(const std::vector<nn::Param*>& params) {
        if (m_.size() != params.size()) {
            m_.assign(params.size(), {});
            v_.assign(params.size(), {});
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i]->size(), 0.0);
                v_[i].assign(params[i]->size(), 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t n = 0; n < p.size(); ++n) {
                const double g = p.grad[n];
                m[n] = cfg_.beta1 * m[n] + (1.0 - cfg_.beta1) * g;
                v[n] = cfg_.beta2 * v[n] + (1.0 - cfg_.beta2) * g * g;
                p.value[n] -= cfg_.lr * (m[n] / bc1) / (std::sqrt(v[n] / bc2) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Rescales gradients so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
inline double clip_grad_norm(const std::vector<nn::Param*>& params, double max_norm) {
    double sq = 0.0;
    for (auto* p : params)
        for (double g : p->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto* p : params)
            for (double& g : p->grad) g *= s;
    }
    return norm;
}

}  // namespace ddm
