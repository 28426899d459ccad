#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "trendmatch/tensor.hpp"

namespace trendmatch {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Moment buffers for a fixed, ordered parameter list.
template <typename T>
struct AdamState {
    AdamHyper hyper;
    std::uint64_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    AdamState() = default;
    AdamState(const std::vector<BasicTensor<T>>& params, AdamHyper h) : hyper(h) {
        m.reserve(params.size());
        v.reserve(params.size());
        for (const auto& p : params) {
            m.emplace_back(p.numel(), T(0));
            v.emplace_back(p.numel(), T(0));
        }
    }
};

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient. Gradients are cleared afterwards.
template <typename T>
void adam_step(std::vector<BasicTensor<T>>& params, AdamState<T>& state) {
    if (params.size() != state.m.size()) {
        throw std::invalid_argument("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    }
    ++state.step;
    const auto& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != p.numel()) {
            throw ShapeError("adam_step", -1, "moment buffer size " + std::to_string(m.size()) + " vs parameter " +
                                                  shape_str(p.shape()));
        }
        // A parameter the loss never reached has a zero gradient this step.
        const bool has_grad = p.has_grad();
        std::span<const T> g = has_grad ? std::span<const T>(p.grad()) : std::span<const T>();
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double gi = has_grad ? static_cast<double>(g[i]) : 0.0;
            m[i] = static_cast<T>(h.beta1 * m[i] + (1.0 - h.beta1) * gi);
            v[i] = static_cast<T>(h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi);
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] = static_cast<T>(p[i] - h.lr * mh / (std::sqrt(vh) + h.epsilon));
        }
        p.zero_grad();
    }
}

}  // namespace trendmatch
