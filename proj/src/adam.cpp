#include "loctrans/adam.hpp"

#include <cmath>

#include "loctrans/error.hpp"

namespace loctrans {

void adam_step(const NamedTensors& params, AdamState& state, double lr, std::span<const double> lr_scale) {
    if (!lr_scale.empty() && lr_scale.size() != params.size()) {
        throw ShapeError("adam lr_scale has " + std::to_string(lr_scale.size()) + " entries for " +
                         std::to_string(params.size()) + " parameters");
    }
    if (state.step == 0) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].second.size(), 0.0);
            state.v[i].assign(params[i].second.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adam state holds " + std::to_string(state.m.size()) +
                         " buffers but received " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params[i];
        if (state.m[i].size() != p.size()) {
            throw ShapeError("adam moment buffer for " + name + " does not match its shape " +
                             shape_str(p.shape()));
        }
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
            if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter " + name);
        }
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].second;
        const double step = lr_scale.empty() ? lr : lr * lr_scale[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        auto w = p.mutable_values();
        const bool has = p.has_grad();
        auto g = has ? p.grad() : std::span<const double>{};
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = has ? g[k] : 0.0;
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            w[k] -= step * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
        }
    }
}

double grad_norm(const NamedTensors& params) {
    double ss = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) ss += g * g;
    }
    return std::sqrt(ss);
}

double clip_grad_norm(const NamedTensors& params, double max_norm) {
    const double norm = grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (const auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.mutable_grad()) g *= s;
        }
    }
    return norm;
}

} // namespace loctrans
