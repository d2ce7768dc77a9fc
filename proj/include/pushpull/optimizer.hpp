#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pushpull/tensor.hpp"

namespace pushpull {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment buffers, one pair per parameter tensor, plus the
/// shared step count.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    long long t = 0;

    static AdamState init(const std::vector<std::pair<std::string, Tensor>>& params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& [name, p] : params) {
            s.m.emplace_back(p.values().size(), 0.0);
            s.v.emplace_back(p.values().size(), 0.0);
        }
        return s;
    }
};

/// Textbook bias-corrected Adam update. Aborts before touching anything if
/// any gradient is non-finite.
inline void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("adam_step: optimizer state does not match parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& p = params[i].second;
        if (state.m[i].size() != p.values().size()) {
            throw std::invalid_argument("adam_step: moment buffers do not match parameter '" + params[i].first + "'");
        }
        for (double g : p.grad()) {
            if (!std::isfinite(g)) {
                throw std::runtime_error("adam_step: non-finite gradient in '" + params[i].first + "', step aborted");
            }
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].second;
        const std::vector<double>& g = p.grad();
        std::vector<double>& values = p.values();
        std::vector<double>& m = state.m[i];
        std::vector<double>& v = state.v[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            values[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
inline double clip_global_norm(const std::vector<std::pair<std::string, Tensor>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        Tensor t = p;
        for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double factor = max_norm / norm;
        for (const auto& [name, p] : params) {
            Tensor t = p;
            for (double& g : t.grad()) g *= factor;
        }
    }
    return norm;
}

}  // namespace pushpull
