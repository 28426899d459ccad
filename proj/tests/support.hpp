#pragma once

// Shared test helpers: random tensors, reference implementations and a
// central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "trendmatch.hpp"

namespace tmtest {

using namespace trendmatch;
using DTensor = BasicTensor<double>;

template <typename T = double>
BasicTensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
    return t;
}

/// Values bounded away from zero by `gap` (for ReLU kinks).
inline DTensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double gap) {
    std::uniform_real_distribution<double> u(gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    DTensor t(std::move(shape));
    for (auto& v : t.data()) v = sign(rng) ? u(rng) : -u(rng);
    return t;
}

/// Distinct values with pairwise gaps of at least `gap` (for max-pool ties).
inline DTensor random_distinct(Shape shape, std::mt19937_64& rng, double gap) {
    DTensor t(std::move(shape));
    std::vector<double> v(t.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i) * gap;
    std::shuffle(v.begin(), v.end(), rng);
    std::copy(v.begin(), v.end(), t.data().begin());
    return t;
}

/// Direct 6-loop cross-correlation, the textbook definition.
template <typename T>
std::vector<double> naive_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                                 std::size_t stride, std::size_t pad, std::size_t& oh, std::size_t& ow) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    oh = (H + 2 * pad - KH) / stride + 1;
    ow = (W + 2 * pad - KW) / stride + 1;
    std::vector<double> out(N * O * oh * ow, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    double acc = b.defined() ? static_cast<double>(b[o]) : 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < KH; ++ky)
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                                acc += static_cast<double>(x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))) *
                                       static_cast<double>(w.at(o, c, ky, kx));
                            }
                    out[((n * O + o) * oh + y) * ow + xx] = acc;
                }
    return out;
}

/// Scalar softmatch for one pixel: 1 - sum_k softmax(p1/tau)_k softmax(p2/tau)_k,
/// written straight from the definition without max-shifting.
inline double softmatch_ref(const std::vector<double>& p1, const std::vector<double>& p2, double tau) {
    double z1 = 0, z2 = 0;
    for (double v : p1) z1 += std::exp(v / tau);
    for (double v : p2) z2 += std::exp(v / tau);
    double ip = 0;
    for (std::size_t k = 0; k < p1.size(); ++k) ip += std::exp(p1[k] / tau) / z1 * (std::exp(p2[k] / tau) / z2);
    return 1.0 - ip;
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheck {
    bool ok = true;
    double worst = 0.0;  // largest |a - n| / (atol + rtol * max(|a|, |n|)); <= 1 passes
    std::size_t checked = 0;
    std::size_t skipped = 0;  // probes where the difference quotient is not a usable oracle
    std::size_t redraws = 0;  // inputs discarded before this check, by the case generator
    std::string detail;
};

inline constexpr double kFdStep = 1e-3;
inline constexpr double kRelTol = 1e-3;
inline constexpr double kAbsTol = 1e-6;

/// Compares backward() against central differences of `loss_fn` with step h.
/// Every element of every input is checked unless `max_per_input` limits it,
/// in which case a random subset is probed.
///
/// With `screen` (the default), a probe is skipped (and counted) when the quotient itself is
/// unreliable: either x+h or x-h takes a different relu / max-pool / clamp
/// branch than x, or the quotient at h disagrees with the one at h/2 by more
/// than a quarter of the tolerance (truncation error of D(h) is about 4/3 of
/// that gap). Neither test looks at the analytic gradient.
inline GradCheck gradcheck(const std::function<DTensor(const std::vector<DTensor>&)>& loss_fn,
                           std::vector<DTensor> inputs, std::mt19937_64& rng, std::size_t max_per_input = 0,
                           bool screen = true) {
    GradCheck r;
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    current_tape<double>().clear();
    std::vector<std::uint8_t> base_trace, trace;
    auto traced = [&](std::vector<std::uint8_t>& into) {
        into.clear();
        if (screen) detail::branch_trace = &into;
        const double v = loss_fn(inputs).item();
        detail::branch_trace = nullptr;
        return v;
    };
    if (screen) detail::branch_trace = &base_trace;
    auto loss = loss_fn(inputs);
    detail::branch_trace = nullptr;
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }
    NoGradGuard guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& t = inputs[k];
        std::vector<std::size_t> idx(t.numel());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (max_per_input && idx.size() > max_per_input) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(max_per_input);
        }
        for (std::size_t i : idx) {
            const double saved = t[i];
            t[i] = saved + kFdStep;
            const double fp = traced(trace);
            bool crossed = trace != base_trace;
            t[i] = saved - kFdStep;
            const double fm = traced(trace);
            crossed = crossed || trace != base_trace;
            t[i] = saved;
            const double numeric = (fp - fm) / (2 * kFdStep);
            if (screen && !crossed) {
                t[i] = saved + kFdStep / 2;
                const double hp = traced(trace);
                t[i] = saved - kFdStep / 2;
                const double hm = traced(trace);
                t[i] = saved;
                const double half = (hp - hm) / kFdStep;
                crossed = std::abs(numeric - half) >
                          0.25 * (kAbsTol + kRelTol * std::max(std::abs(numeric), std::abs(half)));
            }
            if (crossed) {
                ++r.skipped;
                continue;
            }
            const double a = analytic[k][i];
            const double score = std::abs(a - numeric) / (kAbsTol + kRelTol * std::max(std::abs(a), std::abs(numeric)));
            ++r.checked;
            if (score > r.worst) {
                r.worst = score;
                if (score > 1.0) {
                    std::ostringstream os;
                    os << "input " << k << " element " << i << ": analytic " << a << " numeric " << numeric;
                    r.detail = os.str();
                }
            }
        }
    }
    r.ok = r.worst <= 1.0;
    return r;
}

/// Random linear read-out of a tensor: sum(w * t) with fixed weights, so
/// every output element influences the checked scalar differently.
inline DTensor readout(const DTensor& t, const DTensor& w) { return sum(mul(t, w)); }

}  // namespace tmtest
