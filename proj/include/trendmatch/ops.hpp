#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "trendmatch/tensor.hpp"

namespace trendmatch {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
    if (s.size() != rank) {
        throw ShapeError(op, -1, "expected rank " + std::to_string(rank) + ", got " + shape_str(s));
    }
}

inline void require_same_shape(const std::string& op, const Shape& a, const Shape& b) {
    if (a.size() != b.size()) {
        throw ShapeError(op, -1, shape_str(a) + " vs " + shape_str(b));
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) {
            throw ShapeError(op, static_cast<int>(i), shape_str(a) + " vs " + shape_str(b));
        }
    }
}

struct ConvGeometry {
    std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
    std::size_t rows() const { return channels * kh * kw; }
    std::size_t cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox*stride - pad + kx lies inside [0, W).
inline std::pair<long, long> valid_span(long ow, long W, long stride, long pad, long kx) {
    long lo = 0;
    while (lo < ow && lo * stride - pad + kx < 0) ++lo;
    long hi = ow;
    while (hi > lo && (hi - 1) * stride - pad + kx >= W) --hi;
    return {lo, hi};
}

// Unfolds one image [C,H,W] into a [C*kh*kw, out_h*out_w] patch matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
    const auto oh = static_cast<long>(g.out_h);
    const auto ow = static_cast<long>(g.out_w);
    const auto H = static_cast<long>(g.height);
    const auto W = static_cast<long>(g.width);
    const auto S = static_cast<long>(g.stride);
    const auto P = static_cast<long>(g.pad);
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* plane = image + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = col + ((c * g.kh + ky) * g.kw + kx) * g.cols();
                const auto [lo, hi] = valid_span(ow, W, S, P, static_cast<long>(kx));
                for (long oy = 0; oy < oh; ++oy) {
                    const long iy = oy * S - P + static_cast<long>(ky);
                    T* dst = row + oy * ow;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + ow, T(0));
                        continue;
                    }
                    const T* src = plane + iy * W - P + static_cast<long>(kx);
                    std::fill(dst, dst + lo, T(0));
                    if (S == 1) {
                        std::copy(src + lo, src + hi, dst + lo);
                    } else {
                        for (long ox = lo; ox < hi; ++ox) dst[ox] = src[ox * S];
                    }
                    std::fill(dst + hi, dst + ow, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
    const auto oh = static_cast<long>(g.out_h);
    const auto ow = static_cast<long>(g.out_w);
    const auto H = static_cast<long>(g.height);
    const auto W = static_cast<long>(g.width);
    const auto S = static_cast<long>(g.stride);
    const auto P = static_cast<long>(g.pad);
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* plane = image + c * g.height * g.width;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = col + ((c * g.kh + ky) * g.kw + kx) * g.cols();
                const auto [lo, hi] = valid_span(ow, W, S, P, static_cast<long>(kx));
                for (long oy = 0; oy < oh; ++oy) {
                    const long iy = oy * S - P + static_cast<long>(ky);
                    if (iy < 0 || iy >= H) {
                        continue;
                    }
                    const T* src = row + oy * ow;
                    T* dst = plane + iy * W - P + static_cast<long>(kx);
                    if (S == 1) {
                        for (long ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
                    } else {
                        for (long ox = lo; ox < hi; ++ox) dst[ox * S] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// 2-D cross-correlation. input [N,Cin,H,W], weight [Cout,Cin,kH,kW], bias [Cout]
/// (bias may be undefined).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      std::size_t stride = 1, std::size_t padding = 0) {
    detail::require_rank("conv2d", input.shape(), 4);
    detail::require_rank("conv2d", weight.shape(), 4);
    if (stride == 0) {
        throw std::invalid_argument("conv2d: stride must be positive");
    }
    const std::size_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != Cin) {
        throw ShapeError("conv2d", 1,
                         "input has " + std::to_string(Cin) + " channels, weight expects " + std::to_string(weight.dim(1)));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
        throw ShapeError("conv2d", 0, "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(Cout) +
                                          " output channels");
    }
    if (H + 2 * padding < kh) {
        throw ShapeError("conv2d", 2, "kernel height " + std::to_string(kh) + " exceeds padded input");
    }
    if (W + 2 * padding < kw) {
        throw ShapeError("conv2d", 3, "kernel width " + std::to_string(kw) + " exceeds padded input");
    }
    detail::ConvGeometry g{Cin, H, W, kh, kw, stride, padding, (H + 2 * padding - kh) / stride + 1,
                           (W + 2 * padding - kw) / stride + 1};
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

    BasicTensor<T> out(Shape{N, Cout, g.out_h, g.out_w});
    // im2col overwrites every entry, so the scratch buffers stay uninitialized.
    std::unique_ptr<T[]> col(pointwise ? nullptr : new T[g.rows() * g.cols()]);
    detail::ConstMatMap<T> wmat(weight.data().data(), Cout, g.rows());
    for (std::size_t n = 0; n < N; ++n) {
        const T* src = input.data().data() + n * Cin * H * W;
        if (!pointwise) {
            detail::im2col(src, g, col.get());
        }
        detail::ConstMatMap<T> cmat(pointwise ? src : col.get(), g.rows(), g.cols());
        detail::MatMap<T> omat(out.data().data() + n * Cout * g.cols(), Cout, g.cols());
        omat.noalias() = wmat * cmat;
        if (bias.defined()) {
            for (std::size_t o = 0; o < Cout; ++o) {
                omat.row(o).array() += bias[o];
            }
        }
    }

    if (needs_grad<T>({&input, &weight, &bias})) {
        record_op(out, [input, weight, bias, g, N, Cout, pointwise](std::span<const T> gout) mutable {
            std::unique_ptr<T[]> col(pointwise ? nullptr : new T[g.rows() * g.cols()]);
            std::unique_ptr<T[]> dcol(pointwise ? nullptr : new T[g.rows() * g.cols()]);
            const std::size_t in_stride = g.channels * g.height * g.width;
            detail::ConstMatMap<T> wmat(weight.data().data(), Cout, g.rows());
            T* dw = weight.requires_grad() ? weight.grad().data() : nullptr;
            T* db = bias.defined() && bias.requires_grad() ? bias.grad().data() : nullptr;
            T* dx = input.requires_grad() ? input.grad().data() : nullptr;
            for (std::size_t n = 0; n < N; ++n) {
                detail::ConstMatMap<T> gmat(gout.data() + n * Cout * g.cols(), Cout, g.cols());
                if (dw) {
                    const T* src = input.data().data() + n * in_stride;
                    if (!pointwise) {
                        detail::im2col(src, g, col.get());
                    }
                    detail::ConstMatMap<T> cmat(pointwise ? src : col.get(), g.rows(), g.cols());
                    detail::MatMap<T> dwmat(dw, Cout, g.rows());
                    dwmat.noalias() += gmat * cmat.transpose();
                }
                if (db) {
                    // Plain loop: an Eigen reduction over a Map peels to the
                    // pointer's alignment, so its summation order is not fixed.
                    const T* go = gout.data() + n * Cout * g.cols();
                    for (std::size_t o = 0; o < Cout; ++o) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < g.cols(); ++i) {
                            acc += go[o * g.cols() + i];
                        }
                        db[o] += acc;
                    }
                }
                if (dx) {
                    if (pointwise) {
                        detail::MatMap<T> dxmat(dx + n * in_stride, g.rows(), g.cols());
                        dxmat.noalias() += wmat.transpose() * gmat;
                    } else {
                        detail::MatMap<T> dcmat(dcol.get(), g.rows(), g.cols());
                        dcmat.noalias() = wmat.transpose() * gmat;
                        detail::col2im_add(dcol.get(), g, dx + n * in_stride);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major order, which alone receives the gradient.
namespace detail {
/// Test hook. When set, relu, maxpool2 and the clamps in distances and losses
/// append their branch choices (active mask, winning slot, clamp side) so a
/// caller can tell whether two evaluations took the same piece of a
/// piecewise-linear graph.
inline thread_local std::vector<std::uint8_t>* branch_trace = nullptr;
}  // namespace detail

template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input) {
    detail::require_rank("maxpool2", input.shape(), 4);
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 != 0) {
        throw ShapeError("maxpool2", 2, "height " + std::to_string(H) + " is odd");
    }
    if (W % 2 != 0) {
        throw ShapeError("maxpool2", 3, "width " + std::to_string(W) + " is odd");
    }
    const std::size_t oh = H / 2, ow = W / 2;
    BasicTensor<T> out(Shape{N, C, oh, ow});
    std::vector<std::size_t> argmax(out.numel());
    const T* x = input.data().data();
    T* y = out.data().data();
    std::size_t k = 0;
    for (std::size_t p = 0; p < N * C; ++p) {
        const std::size_t base = p * H * W;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox, ++k) {
                std::size_t best = base + (2 * oy) * W + 2 * ox;
                const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
                std::uint8_t slot = 0;
                for (std::uint8_t j = 0; j < 3; ++j) {
                    if (x[cand[j]] > x[best]) {
                        best = cand[j];
                        slot = static_cast<std::uint8_t>(j + 1);
                    }
                }
                if (detail::branch_trace) {
                    detail::branch_trace->push_back(slot);
                }
                argmax[k] = best;
                y[k] = x[best];
            }
        }
    }
    if (needs_grad<T>({&input})) {
        record_op(out, [input, argmax = std::move(argmax)](std::span<const T> gout) mutable {
            auto gx = input.grad();
            for (std::size_t i = 0; i < gout.size(); ++i) {
                gx[argmax[i]] += gout[i];
            }
        });
    }
    return out;
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& input) {
    detail::require_rank("upsample2", input.shape(), 4);
    const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t oh = 2 * H, ow = 2 * W;
    BasicTensor<T> out(Shape{N, C, oh, ow});
    const T* x = input.data().data();
    T* y = out.data().data();
    for (std::size_t p = 0; p < N * C; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            const T* src = x + p * H * W + (oy / 2) * W;
            T* dst = y + p * oh * ow + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
                dst[ox] = src[ox / 2];
            }
        }
    }
    if (needs_grad<T>({&input})) {
        record_op(out, [input, N, C, H, W](std::span<const T> gout) mutable {
            auto gx = input.grad();
            const std::size_t oh = 2 * H, ow = 2 * W;
            for (std::size_t p = 0; p < N * C; ++p) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const T* src = gout.data() + p * oh * ow + oy * ow;
                    T* dst = gx.data() + p * H * W + (oy / 2) * W;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        dst[ox / 2] += src[ox];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
    BasicTensor<T> out(input.shape());
    auto x = input.data();
    auto y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = x[i] > T(0) ? x[i] : T(0);
    }
    if (detail::branch_trace) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            detail::branch_trace->push_back(x[i] > T(0));
        }
    }
    if (needs_grad<T>({&input})) {
        record_op(out, [input](std::span<const T> gout) mutable {
            auto x = input.data();
            auto gx = input.grad();
            for (std::size_t i = 0; i < gout.size(); ++i) {
                if (x[i] > T(0)) {
                    gx[i] += gout[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape("add", a.shape(), b.shape());
    BasicTensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a[i] + b[i];
    }
    if (needs_grad<T>({&a, &b})) {
        record_op(out, [a, b](std::span<const T> gout) mutable {
            accumulate_grad(a, gout);
            accumulate_grad(b, gout);
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape("mul", a.shape(), b.shape());
    BasicTensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a[i] * b[i];
    }
    if (needs_grad<T>({&a, &b})) {
        record_op(out, [a, b](std::span<const T> gout) mutable {
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * b[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i] * a[i];
            }
        });
    }
    return out;
}

/// Sum of all elements into a scalar, accumulated in double.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
    double acc = 0.0;
    for (T v : input.data()) acc += v;
    auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
    if (needs_grad<T>({&input})) {
        record_op(out, [input](std::span<const T> gout) mutable {
            for (auto& g : input.grad()) g += gout[0];
        });
    }
    return out;
}

/// Σ_i weights[i] * terms[i] over scalar tensors.
template <typename T>
BasicTensor<T> weighted_sum(const std::vector<BasicTensor<T>>& terms, const std::vector<double>& weights) {
    if (terms.size() != weights.size()) {
        throw std::invalid_argument("weighted_sum: " + std::to_string(terms.size()) + " terms but " +
                                    std::to_string(weights.size()) + " weights");
    }
    double acc = 0.0;
    bool grad = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        acc += weights[i] * static_cast<double>(terms[i].item());
        grad = grad || needs_grad<T>({&terms[i]});
    }
    auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
    if (grad) {
        record_op(out, [terms, weights](std::span<const T> gout) mutable {
            for (std::size_t i = 0; i < terms.size(); ++i) {
                if (terms[i].requires_grad()) {
                    terms[i].grad()[0] += static_cast<T>(weights[i]) * gout[0];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel ops

/// Concatenates along the channel axis; a's channels come first.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_rank("concat_channels", a.shape(), 4);
    detail::require_rank("concat_channels", b.shape(), 4);
    for (std::size_t axis : {0u, 2u, 3u}) {
        if (a.dim(axis) != b.dim(axis)) {
            throw ShapeError("concat_channels", static_cast<int>(axis), shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        }
    }
    const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    BasicTensor<T> out(Shape{N, Ca + Cb, a.dim(2), a.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.data().data() + n * Ca * HW, Ca * HW, out.data().data() + n * (Ca + Cb) * HW);
        std::copy_n(b.data().data() + n * Cb * HW, Cb * HW, out.data().data() + (n * (Ca + Cb) + Ca) * HW);
    }
    if (needs_grad<T>({&a, &b})) {
        record_op(out, [a, b, N, Ca, Cb, HW](std::span<const T> gout) mutable {
            for (std::size_t n = 0; n < N; ++n) {
                const T* g = gout.data() + n * (Ca + Cb) * HW;
                if (a.requires_grad()) {
                    T* ga = a.grad().data() + n * Ca * HW;
                    for (std::size_t i = 0; i < Ca * HW; ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    T* gb = b.grad().data() + n * Cb * HW;
                    for (std::size_t i = 0; i < Cb * HW; ++i) gb[i] += g[Ca * HW + i];
                }
            }
        });
    }
    return out;
}

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct NormStats {
    BasicTensor<T> mean;
    BasicTensor<T> var;
    static NormStats identity(std::size_t channels) {
        return {BasicTensor<T>(Shape{channels}, T(0)), BasicTensor<T>(Shape{channels}, T(1))};
    }
};

inline constexpr double kNormMomentum = 0.1;
inline constexpr double kNormEpsilon = 1e-5;

/// Per-channel batch normalization over (N,H,W). Training mode normalizes
/// with batch statistics and folds them into `stats` with momentum 0.1
/// (unbiased variance); inference mode uses `stats` as constants.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         NormStats<T>& stats, bool training) {
    detail::require_rank("batchnorm", input.shape(), 4);
    const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
    for (const BasicTensor<T>* p : {&gamma, &beta, static_cast<const BasicTensor<T>*>(&stats.mean), static_cast<const BasicTensor<T>*>(&stats.var)}) {
        if (p->rank() != 1 || p->dim(0) != C) {
            throw ShapeError("batchnorm", 1, "per-channel parameter " + shape_str(p->shape()) + " vs " +
                                                 std::to_string(C) + " channels");
        }
    }
    const std::size_t count = N * HW;
    if (training && count <= 1) {
        throw std::invalid_argument("batchnorm: training mode needs more than one value per channel, got " +
                                    std::to_string(count));
    }
    std::vector<T> mean(C), inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        if (training) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* x = input.data().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) s += x[i];
            }
            const double m = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* x = input.data().data() + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double d = x[i] - m;
                    ss += d * d;
                }
            }
            const double v = ss / static_cast<double>(count);
            mean[c] = static_cast<T>(m);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(v + kNormEpsilon));
            const double unbiased = ss / static_cast<double>(count - 1);
            stats.mean[c] = static_cast<T>((1.0 - kNormMomentum) * stats.mean[c] + kNormMomentum * m);
            stats.var[c] = static_cast<T>((1.0 - kNormMomentum) * stats.var[c] + kNormMomentum * unbiased);
        } else {
            mean[c] = stats.mean[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) + kNormEpsilon));
        }
    }
    BasicTensor<T> out(input.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* x = input.data().data() + (n * C + c) * HW;
            T* y = out.data().data() + (n * C + c) * HW;
            const T scale = gamma[c] * inv_std[c];
            const T shift = beta[c] - mean[c] * scale;
            for (std::size_t i = 0; i < HW; ++i) y[i] = x[i] * scale + shift;
        }
    }
    if (needs_grad<T>({&input, &gamma, &beta})) {
        record_op(out, [input, gamma, beta, mean, inv_std, training, N, C, HW](std::span<const T> gout) mutable {
            const double cnt = static_cast<double>(N * HW);
            for (std::size_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* x = input.data().data() + (n * C + c) * HW;
                    const T* g = gout.data() + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_g += g[i];
                        sum_gx += g[i] * (x[i] - mean[c]) * inv_std[c];
                    }
                }
                if (gamma.requires_grad()) gamma.grad()[c] += static_cast<T>(sum_gx);
                if (beta.requires_grad()) beta.grad()[c] += static_cast<T>(sum_g);
                if (!input.requires_grad()) continue;
                // dx = k*g + a*x + b, folded per channel
                const double k = static_cast<double>(gamma[c]) * inv_std[c];
                const double a = training ? -k * inv_std[c] * sum_gx / cnt : 0.0;
                const double b = training ? -k * sum_g / cnt - a * mean[c] : 0.0;
                const T kt = static_cast<T>(k), at = static_cast<T>(a), bt = static_cast<T>(b);
                T* gx_all = input.grad().data();
                for (std::size_t n = 0; n < N; ++n) {
                    const T* x = input.data().data() + (n * C + c) * HW;
                    const T* g = gout.data() + (n * C + c) * HW;
                    T* gx = gx_all + (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) gx[i] += kt * g[i] + at * x[i] + bt;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax

/// Splits a tensor of rank >= 2 into (outer, channels, inner) around axis 1.
struct ChannelLayout {
    std::size_t outer, channels, inner;
    static ChannelLayout of(const Shape& s) {
        if (s.size() < 2) {
            throw ShapeError("channel op", -1, "need rank >= 2, got " + shape_str(s));
        }
        std::size_t inner = 1;
        for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
        return {s[0], s[1], inner};
    }
    std::size_t index(std::size_t o, std::size_t c, std::size_t i) const { return (o * channels + c) * inner + i; }
};

/// Tempered softmax of one channel vector, stabilized by subtracting the max.
/// `stride` steps between channels.
template <typename T>
void softmax_vector(const T* p, std::size_t channels, std::size_t stride, double tau, T* s) {
    double mx = p[0];
    for (std::size_t c = 1; c < channels; ++c) mx = std::max<double>(mx, p[c * stride]);
    double z = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double e = std::exp((p[c * stride] - mx) / tau);
        s[c * stride] = static_cast<T>(e);
        z += e;
    }
    for (std::size_t c = 0; c < channels; ++c) s[c * stride] = static_cast<T>(s[c * stride] / z);
}

inline void require_positive_tau(const char* op, double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw std::invalid_argument(std::string(op) + ": temperature must be positive, got " + std::to_string(tau));
    }
}

/// Channel-wise softmax with temperature `tau` (axis 1).
template <typename T>
BasicTensor<T> softmax_tau(const BasicTensor<T>& input, double tau) {
    require_positive_tau("softmax_tau", tau);
    const auto L = ChannelLayout::of(input.shape());
    BasicTensor<T> out(input.shape());
    for (std::size_t o = 0; o < L.outer; ++o) {
        for (std::size_t i = 0; i < L.inner; ++i) {
            softmax_vector(input.data().data() + L.index(o, 0, i), L.channels, L.inner, tau,
                           out.data().data() + L.index(o, 0, i));
        }
    }
    if (needs_grad<T>({&input})) {
        record_op(out, [input, out_values = out.clone(), L, tau](std::span<const T> gout) mutable {
            auto gx = input.grad();
            for (std::size_t o = 0; o < L.outer; ++o) {
                for (std::size_t i = 0; i < L.inner; ++i) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < L.channels; ++c) {
                        const auto k = L.index(o, c, i);
                        dot += static_cast<double>(gout[k]) * out_values[k];
                    }
                    for (std::size_t c = 0; c < L.channels; ++c) {
                        const auto k = L.index(o, c, i);
                        gx[k] += static_cast<T>(out_values[k] * (gout[k] - dot) / tau);
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace trendmatch
