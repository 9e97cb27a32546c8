#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mixtts/core/nn.hpp"

// LAMB optimizer with Noam annealing and global-norm gradient clipping.

namespace mixtts {

// lr = base * min(step/warmup, sqrt(warmup/step)): linear warmup to the peak
// at step == warmup, then inverse square-root decay.
inline double noam_lr(Index step, double base_lr = 0.1, Index warmup = 1000) {
    require_config(step >= 1, "noam_lr: step must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return base_lr * std::min(s / w, std::sqrt(w / s));
}

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the factor that was applied (1 when no clipping happened).
template <typename T>
double clip_gradients(ParamMap<T>& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (T g : p.grad_view()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return 1.0;
    const double factor = max_norm / norm;
    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (T& g : p.grad()) g = static_cast<T>(g * factor);
    }
    return factor;
}

template <typename T>
struct LambConfig {
    T beta1 = static_cast<T>(0.9);
    T beta2 = static_cast<T>(0.98);
    T eps = static_cast<T>(1e-8);
    T weight_decay = static_cast<T>(1e-6);
    bool use_trust_ratio = true;  // disabled reduces the update to Adam
};

template <typename T>
struct LambState {
    Index step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    void init_like(const ParamMap<T>& params) {
        step = 0;
        m.clear();
        v.clear();
        for (const auto& [name, p] : params) {
            m.emplace_back(p.values().size(), T(0));
            v.emplace_back(p.values().size(), T(0));
        }
    }

    bool matches(const ParamMap<T>& params) const {
        if (m.size() != params.size()) return false;
        for (std::size_t i = 0; i < params.size(); ++i)
            if (m[i].size() != params[i].second.values().size()) return false;
        return true;
    }
};

// One optimizer step. Per tensor: bias-corrected Adam moments give the update
// direction r = m_hat / (sqrt(v_hat) + eps) + wd * w; the applied step is
// lr * phi * r with trust ratio phi = |w| / |r| (1 when either norm is 0).
template <typename T>
void lamb_step(ParamMap<T>& params, LambState<T>& state, double lr,
               const LambConfig<T>& cfg = {}) {
    if (!state.matches(params)) {
        if (state.m.empty())
            state.init_like(params);
        else
            throw ConfigError("lamb_step: optimizer state does not match parameter list");
    }
    state.step += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg.beta1), state.step));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(cfg.beta2), state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].second;
        if (!p.has_grad()) continue;
        auto& w = p.values();
        const auto& g = p.grad_view();
        auto& m = state.m[i];
        auto& v = state.v[i];
        double w_sq = 0.0, r_sq = 0.0;
        std::vector<T> r(w.size());
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (T(1) - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (T(1) - cfg.beta2) * g[j] * g[j];
            const T m_hat = m[j] / bc1;
            const T v_hat = v[j] / bc2;
            r[j] = m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * w[j];
            w_sq += static_cast<double>(w[j]) * static_cast<double>(w[j]);
            r_sq += static_cast<double>(r[j]) * static_cast<double>(r[j]);
        }
        double phi = 1.0;
        if (cfg.use_trust_ratio && w_sq > 0.0 && r_sq > 0.0) phi = std::sqrt(w_sq) / std::sqrt(r_sq);
        const T scale = static_cast<T>(lr * phi);
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= scale * r[j];
    }
}

}  // namespace mixtts
