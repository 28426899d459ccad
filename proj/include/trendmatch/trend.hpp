#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "trendmatch/distances.hpp"
#include "trendmatch/network.hpp"

namespace trendmatch {

enum class Trend : std::uint8_t { unchanged = 0, appear = 1, disappear = 2, transform = 3 };

/// H x W map of small integer codes.
template <typename Tag>
struct CodeMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;

    CodeMap() = default;
    CodeMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

    std::size_t size() const { return values.size(); }
    std::uint8_t& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
    std::uint8_t operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    bool operator==(const CodeMap&) const = default;
};

struct ChangeTag {};
struct TrendTag {};

/// Binary map, 1 = changed.
using ChangeMap = CodeMap<ChangeTag>;
/// Codes 0=unchanged, 1=appear, 2=disappear, 3=transform.
using TrendMap = CodeMap<TrendTag>;

/// Trend of one pixel from the highlighted channels of the two streams.
inline Trend classify_trend(std::size_t a1, std::size_t a2, std::size_t bg) {
    if (a1 == a2) return Trend::unchanged;
    if (a1 == bg) return Trend::appear;
    if (a2 == bg) return Trend::disappear;
    return Trend::transform;
}

/// Thresholds a distance map (pixel changed iff d >= threshold), one map per sample.
template <typename T>
std::vector<ChangeMap> decode_change(const BasicDistanceMap<T>& dm, double threshold = 0.5) {
    const auto& v = dm.values;
    detail::require_rank("decode_change", v.shape(), 4);
    const std::size_t N = v.dim(0), H = v.dim(2), W = v.dim(3);
    std::vector<ChangeMap> out;
    out.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
        ChangeMap m(H, W);
        for (std::size_t i = 0; i < H * W; ++i) {
            m.values[i] = static_cast<double>(v[n * H * W + i]) >= threshold ? 1 : 0;
        }
        out.push_back(std::move(m));
    }
    return out;
}

/// Per-pixel argmax over channels; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> channel_argmax(const BasicTensor<T>& f, std::size_t n) {
    const std::size_t C = f.dim(1), HW = f.dim(2) * f.dim(3);
    std::vector<std::size_t> out(HW, 0);
    const T* base = f.data().data() + n * C * HW;
    for (std::size_t i = 0; i < HW; ++i) {
        for (std::size_t c = 1; c < C; ++c) {
            if (base[c * HW + i] > base[out[i] * HW + i]) out[i] = c;
        }
    }
    return out;
}

/// Trend maps from the independent features: compares which channel each
/// stream highlights, with `bg_index` as the background channel.
template <typename T>
std::vector<TrendMap> decode_trend(const TensorPair<T>& independent, std::size_t bg_index) {
    const auto& f1 = independent.t1;
    const auto& f2 = independent.t2;
    detail::require_rank("decode_trend", f1.shape(), 4);
    detail::require_same_shape("decode_trend", f1.shape(), f2.shape());
    if (bg_index >= f1.dim(1)) {
        throw std::invalid_argument("decode_trend: background channel " + std::to_string(bg_index) +
                                    " out of range for " + std::to_string(f1.dim(1)) + " channels");
    }
    const std::size_t N = f1.dim(0), H = f1.dim(2), W = f1.dim(3);
    std::vector<TrendMap> out;
    out.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
        const auto a1 = channel_argmax(f1, n);
        const auto a2 = channel_argmax(f2, n);
        TrendMap m(H, W);
        for (std::size_t i = 0; i < H * W; ++i) {
            m.values[i] = static_cast<std::uint8_t>(classify_trend(a1[i], a2[i], bg_index));
        }
        out.push_back(std::move(m));
    }
    return out;
}

inline ChangeMap trend_to_change(const TrendMap& tm) {
    ChangeMap m(tm.height, tm.width);
    for (std::size_t i = 0; i < tm.size(); ++i) m.values[i] = tm.values[i] != 0 ? 1 : 0;
    return m;
}

/// Fraction of pixels where two change maps disagree.
inline double disagreement(const ChangeMap& a, const ChangeMap& b) {
    if (a.height != b.height || a.width != b.width) {
        throw std::invalid_argument("disagreement: map extents differ");
    }
    if (a.size() == 0) return 0.0;
    std::size_t diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += a.values[i] != b.values[i];
    return static_cast<double>(diff) / static_cast<double>(a.size());
}

}  // namespace trendmatch
