#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "trendmatch/ops.hpp"
#include "trendmatch/tensor.hpp"

namespace trendmatch {

enum class DistanceKind { softmatch, cosine, euclidean };

inline std::string_view to_string(DistanceKind kind) {
    switch (kind) {
        case DistanceKind::softmatch: return "softmatch";
        case DistanceKind::cosine: return "cosine";
        case DistanceKind::euclidean: return "euclidean";
    }
    return "unknown";
}

inline DistanceKind parse_distance(std::string_view name) {
    if (name == "softmatch") return DistanceKind::softmatch;
    if (name == "cosine") return DistanceKind::cosine;
    if (name == "euclidean") return DistanceKind::euclidean;
    throw std::invalid_argument("unknown distance '" + std::string(name) + "'");
}

/// Per-pixel distance between two paired feature maps, shape [N,1,H,W].
template <typename T>
struct BasicDistanceMap {
    BasicTensor<T> values;
    DistanceKind kind = DistanceKind::softmatch;
};

using DistanceMap = BasicDistanceMap<float>;

namespace detail {

inline void check_pair(const char* op, const Shape& a, const Shape& b) {
    require_rank(op, a, 4);
    require_same_shape(op, a, b);
}

// Pulls a value onto the nearest representable point strictly inside (0,1).
template <typename T>
T open_unit(double d) {
    const T lo = std::nextafter(T(0), T(1));
    const T hi = std::nextafter(T(1), T(0));
    const T v = static_cast<T>(d);
    if (branch_trace) branch_trace->push_back(v < lo ? 1 : (v > hi ? 2 : 0));
    return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace detail

/// Softmatch distance: one minus the inner product of the tempered channel
/// softmaxes of the two feature pixels. Lies in (0,1); values that round onto
/// an endpoint in T are pulled one ulp inside.
///
/// d/dp1_k = -(1/tau) * s1_k * (s2_k - <s1,s2>), symmetrically for p2.
template <typename T>
BasicDistanceMap<T> softmatch(const BasicTensor<T>& f1, const BasicTensor<T>& f2, double tau = 0.1) {
    detail::check_pair("softmatch", f1.shape(), f2.shape());
    require_positive_tau("softmatch", tau);
    const std::size_t N = f1.dim(0), C = f1.dim(1), HW = f1.dim(2) * f1.dim(3);
    if (C < 2) {
        throw ShapeError("softmatch", 1, "need at least 2 channels, got " + std::to_string(C));
    }
    BasicTensor<T> out(Shape{N, 1, f1.dim(2), f1.dim(3)});
    std::vector<T> s1(f1.numel()), s2(f2.numel());
    std::vector<double> inner(N * HW);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            const std::size_t base = n * C * HW + i;
            softmax_vector(f1.data().data() + base, C, HW, tau, s1.data() + base);
            softmax_vector(f2.data().data() + base, C, HW, tau, s2.data() + base);
            double ip = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                ip += static_cast<double>(s1[base + c * HW]) * s2[base + c * HW];
            }
            inner[n * HW + i] = ip;
            out[n * HW + i] = detail::open_unit<T>(1.0 - ip);
        }
    }
    if (needs_grad<T>({&f1, &f2})) {
        record_op(out, [f1, f2, s1 = std::move(s1), s2 = std::move(s2), inner = std::move(inner), N, C, HW,
                        tau](std::span<const T> gout) mutable {
            auto push = [&](const BasicTensor<T>& f, const std::vector<T>& own, const std::vector<T>& other) {
                if (!f.requires_grad()) return;
                auto g = f.grad();
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t i = 0; i < HW; ++i) {
                        const double go = gout[n * HW + i];
                        const double ip = inner[n * HW + i];
                        for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t k = n * C * HW + c * HW + i;
                            g[k] += static_cast<T>(-go * own[k] * (other[k] - ip) / tau);
                        }
                    }
                }
            };
            push(f1, s1, s2);
            push(f2, s2, s1);
        });
    }
    return {out, DistanceKind::softmatch};
}

/// Cosine distance squashed to [0,1]: (1 - cos)/2. A zero vector on either
/// side yields 0.5 with zero gradient.
template <typename T>
BasicDistanceMap<T> cosine_dist(const BasicTensor<T>& f1, const BasicTensor<T>& f2) {
    detail::check_pair("cosine_dist", f1.shape(), f2.shape());
    const std::size_t N = f1.dim(0), C = f1.dim(1), HW = f1.dim(2) * f1.dim(3);
    BasicTensor<T> out(Shape{N, 1, f1.dim(2), f1.dim(3)});
    // per pixel: |a|, |b|, cos; zero norm marks the fallback
    std::vector<double> na(N * HW), nb(N * HW), cs(N * HW);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            double ab = 0.0, aa = 0.0, bb = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t k = n * C * HW + c * HW + i;
                const double a = f1[k], b = f2[k];
                ab += a * b;
                aa += a * a;
                bb += b * b;
            }
            const std::size_t p = n * HW + i;
            na[p] = std::sqrt(aa);
            nb[p] = std::sqrt(bb);
            if (na[p] == 0.0 || nb[p] == 0.0) {
                cs[p] = 0.0;
                out[p] = T(0.5);
                continue;
            }
            cs[p] = std::clamp(ab / (na[p] * nb[p]), -1.0, 1.0);
            out[p] = static_cast<T>((1.0 - cs[p]) / 2.0);
        }
    }
    if (needs_grad<T>({&f1, &f2})) {
        record_op(out, [f1, f2, na = std::move(na), nb = std::move(nb), cs = std::move(cs), N, C,
                        HW](std::span<const T> gout) mutable {
            auto push = [&](const BasicTensor<T>& f, const BasicTensor<T>& other, const std::vector<double>& nown,
                            const std::vector<double>& nother) {
                if (!f.requires_grad()) return;
                auto g = f.grad();
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t p = n * HW + i;
                        if (nown[p] == 0.0 || nother[p] == 0.0) continue;
                        const double go = gout[p];
                        for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t k = n * C * HW + c * HW + i;
                            const double dcos = other[k] / (nown[p] * nother[p]) - cs[p] * f[k] / (nown[p] * nown[p]);
                            g[k] += static_cast<T>(-0.5 * go * dcos);
                        }
                    }
                }
            };
            push(f1, f2, na, nb);
            push(f2, f1, nb, na);
        });
    }
    return {out, DistanceKind::cosine};
}

/// Euclidean distance squashed to [0,1): 1 - exp(-||a - b||). The gradient at
/// a == b is taken as zero.
template <typename T>
BasicDistanceMap<T> euclid_dist(const BasicTensor<T>& f1, const BasicTensor<T>& f2) {
    detail::check_pair("euclid_dist", f1.shape(), f2.shape());
    const std::size_t N = f1.dim(0), C = f1.dim(1), HW = f1.dim(2) * f1.dim(3);
    BasicTensor<T> out(Shape{N, 1, f1.dim(2), f1.dim(3)});
    std::vector<double> radius(N * HW);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
            double ss = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t k = n * C * HW + c * HW + i;
                const double d = static_cast<double>(f1[k]) - f2[k];
                ss += d * d;
            }
            radius[n * HW + i] = std::sqrt(ss);
            out[n * HW + i] = static_cast<T>(-std::expm1(-radius[n * HW + i]));
        }
    }
    if (needs_grad<T>({&f1, &f2})) {
        record_op(out, [f1, f2, radius = std::move(radius), N, C, HW](std::span<const T> gout) mutable {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t i = 0; i < HW; ++i) {
                    const double r = radius[n * HW + i];
                    if (r == 0.0) continue;
                    const double scale = gout[n * HW + i] * std::exp(-r) / r;
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t k = n * C * HW + c * HW + i;
                        const double d = scale * (static_cast<double>(f1[k]) - f2[k]);
                        if (f1.requires_grad()) f1.grad()[k] += static_cast<T>(d);
                        if (f2.requires_grad()) f2.grad()[k] -= static_cast<T>(d);
                    }
                }
            }
        });
    }
    return {out, DistanceKind::euclidean};
}

template <typename T>
BasicDistanceMap<T> distance(DistanceKind kind, const BasicTensor<T>& f1, const BasicTensor<T>& f2, double tau) {
    switch (kind) {
        case DistanceKind::softmatch: return softmatch(f1, f2, tau);
        case DistanceKind::cosine: return cosine_dist(f1, f2);
        case DistanceKind::euclidean: return euclid_dist(f1, f2);
    }
    throw std::invalid_argument("unknown distance kind");
}

}  // namespace trendmatch
