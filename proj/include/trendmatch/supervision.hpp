#pragma once

#include <cmath>
#include <cstddef>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trendmatch/distances.hpp"
#include "trendmatch/network.hpp"
#include "trendmatch/ops.hpp"

namespace trendmatch {

/// Channel of F_I trained to highlight on background.
inline constexpr std::size_t kBackgroundChannel = 2;

inline constexpr double kLogClamp = 1e-7;

struct LossWeights {
    double gcd = 1.0;
    double tcd = 1.0;
    double bg = 1.0;
    bool operator==(const LossWeights&) const = default;
};

namespace detail {

template <typename T>
void check_binary_label(const char* op, const BasicTensor<T>& label) {
    for (T v : label.data()) {
        if (v != T(0) && v != T(1)) {
            throw std::invalid_argument(std::string(op) + ": change label values must be 0 or 1, found " +
                                        std::to_string(static_cast<double>(v)));
        }
    }
}

inline bool& warnings_enabled() {
    static bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Silences the per-sample warnings emitted by background_loss.
inline void set_loss_warnings(bool enabled) { detail::warnings_enabled() = enabled; }

/// Binary cross-entropy between a distance map used directly as change
/// probability and a {0,1} change label, averaged over all pixels.
template <typename T>
BasicTensor<T> bce_map_loss(const BasicDistanceMap<T>& dm, const BasicTensor<T>& label) {
    const auto& d = dm.values;
    detail::require_same_shape("bce_map_loss", d.shape(), label.shape());
    detail::check_binary_label("bce_map_loss", label);
    const std::size_t count = d.numel();
    if (count == 0) throw std::invalid_argument("bce_map_loss: empty map");
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double p = std::clamp<double>(d[i], kLogClamp, 1.0 - kLogClamp);
        if (detail::branch_trace) detail::branch_trace->push_back(d[i] < kLogClamp ? 1 : (d[i] > 1.0 - kLogClamp ? 2 : 0));
        acc -= label[i] != T(0) ? std::log(p) : std::log1p(-p);
    }
    auto out = BasicTensor<T>::scalar(static_cast<T>(acc / static_cast<double>(count)));
    if (needs_grad<T>({&d})) {
        record_op(out, [d, label, count](std::span<const T> gout) mutable {
            auto g = d.grad();
            const double scale = gout[0] / static_cast<double>(count);
            for (std::size_t i = 0; i < count; ++i) {
                const double raw = d[i];
                if (raw < kLogClamp || raw > 1.0 - kLogClamp) continue;  // clamped: flat
                g[i] += static_cast<T>(label[i] != T(0) ? -scale / raw : scale / (1.0 - raw));
            }
        });
    }
    return out;
}

/// Positive-only cross-entropy on the background channel of each F_I stream,
/// driven by the opposite change label: only unchanged pixels contribute
/// -log softmax_tau(p)_bg. Each sample is averaged over its own unchanged
/// pixels, samples are averaged over the batch, and the two streams are
/// averaged. A sample with no unchanged pixel contributes 0.
template <typename T>
BasicTensor<T> background_loss(const TensorPair<T>& independent, const BasicTensor<T>& label, double tau,
                               std::size_t bg_index = kBackgroundChannel) {
    require_positive_tau("background_loss", tau);
    const auto& f1 = independent.t1;
    const auto& f2 = independent.t2;
    detail::require_rank("background_loss", f1.shape(), 4);
    detail::require_same_shape("background_loss", f1.shape(), f2.shape());
    const std::size_t N = f1.dim(0), C = f1.dim(1), H = f1.dim(2), W = f1.dim(3), HW = H * W;
    detail::require_same_shape("background_loss", label.shape(), Shape{N, 1, H, W});
    detail::check_binary_label("background_loss", label);
    if (bg_index >= C) {
        throw ShapeError("background_loss", 1, "background channel " + std::to_string(bg_index) + " out of range");
    }

    std::vector<std::size_t> unchanged(N, 0);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) unchanged[n] += label[n * HW + i] == T(0);
        if (unchanged[n] == 0 && detail::warnings_enabled()) {
            std::cerr << "warning: background_loss: sample " << n << " has no unchanged pixels; it contributes 0\n";
        }
    }

    auto stream_loss = [&](const BasicTensor<T>& f) {
        double total = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            if (unchanged[n] == 0) continue;
            double acc = 0.0;
            for (std::size_t i = 0; i < HW; ++i) {
                if (label[n * HW + i] != T(0)) continue;
                const T* p = f.data().data() + n * C * HW + i;
                double mx = p[0];
                for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, p[c * HW]);
                double z = 0.0;
                for (std::size_t c = 0; c < C; ++c) z += std::exp((p[c * HW] - mx) / tau);
                acc += std::log(z) - (p[bg_index * HW] - mx) / tau;
            }
            total += acc / static_cast<double>(unchanged[n]);
        }
        return total / static_cast<double>(N);
    };
    const double value = 0.5 * (stream_loss(f1) + stream_loss(f2));
    auto out = BasicTensor<T>::scalar(static_cast<T>(value));

    if (needs_grad<T>({&f1, &f2})) {
        record_op(out, [f1, f2, label, unchanged, N, C, HW, tau, bg_index](std::span<const T> gout) mutable {
            auto push = [&](const BasicTensor<T>& f) {
                if (!f.requires_grad()) return;
                auto g = f.grad();
                std::vector<double> s(C);
                for (std::size_t n = 0; n < N; ++n) {
                    if (unchanged[n] == 0) continue;
                    const double scale = 0.5 * gout[0] / (static_cast<double>(N) * static_cast<double>(unchanged[n]));
                    for (std::size_t i = 0; i < HW; ++i) {
                        if (label[n * HW + i] != T(0)) continue;
                        const std::size_t base = n * C * HW + i;
                        const T* p = f.data().data() + base;
                        double mx = p[0];
                        for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, p[c * HW]);
                        double z = 0.0;
                        for (std::size_t c = 0; c < C; ++c) {
                            s[c] = std::exp((p[c * HW] - mx) / tau);
                            z += s[c];
                        }
                        for (auto& v : s) v /= z;
                        for (std::size_t c = 0; c < C; ++c) {
                            const double target = c == bg_index ? 1.0 : 0.0;
                            g[base + c * HW] += static_cast<T>(scale * (s[c] - target) / tau);
                        }
                    }
                }
            };
            push(f1);
            push(f2);
        });
    }
    return out;
}

template <typename T>
struct BasicLossReport {
    BasicTensor<T> total;  // differentiable weighted sum
    double l_gcd = 0.0;
    double l_tcd = 0.0;
    double l_bg = 0.0;
    double weighted = 0.0;
    std::size_t pixels = 0;            // pixels in each distance-map term
    std::size_t unchanged_pixels = 0;  // pixels in the background term (per stream)
};

using LossReport = BasicLossReport<float>;

/// All three supervisions from the change label alone:
/// BCE on the F_C distance map (GCD branch), BCE on the F_I softmatch map
/// (TCD branch) and the background-channel loss on F_I.
template <typename T>
BasicLossReport<T> total_loss(const Features<T>& features, const BasicTensor<T>& label, const LossWeights& weights,
                              double tau, DistanceKind gcd_distance = DistanceKind::softmatch) {
    auto gcd = bce_map_loss(distance(gcd_distance, features.common.t1, features.common.t2, tau), label);
    auto tcd = bce_map_loss(softmatch(features.independent.t1, features.independent.t2, tau), label);
    auto bg = background_loss(features.independent, label, tau);

    BasicLossReport<T> r;
    r.l_gcd = gcd.item();
    r.l_tcd = tcd.item();
    r.l_bg = bg.item();
    r.total = weighted_sum<T>({gcd, tcd, bg}, {weights.gcd, weights.tcd, weights.bg});
    r.weighted = weights.gcd * r.l_gcd + weights.tcd * r.l_tcd + weights.bg * r.l_bg;
    r.pixels = label.numel();
    for (T v : label.data()) r.unchanged_pixels += v == T(0);
    return r;
}

}  // namespace trendmatch
