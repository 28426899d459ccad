#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "trendmatch/network.hpp"
#include "trendmatch/tensor.hpp"
#include "trendmatch/trend.hpp"

namespace trendmatch {

/// Bi-temporal pair with its labels. Images are [3,H,W] in [0,1].
/// The trend label is evaluation-only and absent when loaded for training.
struct SamplePair {
    Tensor t1;
    Tensor t2;
    ChangeMap change_label;
    std::optional<TrendMap> trend_label;
    std::uint64_t seed = 0;

    std::size_t height() const { return change_label.height; }
    std::size_t width() const { return change_label.width; }
};

struct IntensityBand {
    double lo = 0.0;
    double hi = 1.0;
    bool operator==(const IntensityBand&) const = default;
};

struct SceneSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t min_shapes = 3;
    std::size_t max_shapes = 5;
    std::size_t min_size = 10;  // shape bounding-box side, pixels
    std::size_t max_size = 20;
    IntensityBand background{0.0, 0.3};
    IntensityBand class_a{0.55, 0.7};
    IntensityBand class_b{0.8, 0.95};
    double background_period = 16.0;  // texture periods, pixels
    double class_a_period = 8.0;
    double class_b_period = 3.0;
    double p_appear = 1.0 / 3.0;
    double p_disappear = 1.0 / 3.0;
    double p_transform = 1.0 / 3.0;  // remainder of the probability mass: static shapes
    double brightness_shift = 0.1;    // per-frame global shift drawn from [-b, b]
    double noise_sigma = 0.02;

    void validate() const;
    bool operator==(const SceneSpec&) const = default;
};

/// Raised when shapes cannot be placed; carries the offending seed.
class GenerationError : public std::runtime_error {
public:
    GenerationError(const std::string& msg, std::uint64_t seed)
        : std::runtime_error(msg + " (seed " + std::to_string(seed) + ")"), seed_(seed) {}
    std::uint64_t seed() const noexcept { return seed_; }

private:
    std::uint64_t seed_;
};

inline void SceneSpec::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("scene spec: " + m); };
    if (height == 0 || width == 0) fail("image extent must be positive");
    if (min_shapes > max_shapes) fail("min_shapes > max_shapes");
    if (min_size == 0 || min_size > max_size) fail("shape sizes must satisfy 0 < min_size <= max_size");
    if (max_size + 2 > std::min(height, width)) fail("max_size does not fit the canvas");
    for (const auto* b : {&background, &class_a, &class_b}) {
        if (!(b->lo >= 0.0 && b->lo <= b->hi && b->hi <= 1.0)) fail("intensity bands must lie in [0,1] with lo <= hi");
    }
    auto overlaps = [](const IntensityBand& a, const IntensityBand& b) { return a.lo <= b.hi && b.lo <= a.hi; };
    if (overlaps(background, class_a) || overlaps(background, class_b) || overlaps(class_a, class_b)) {
        fail("intensity bands must be disjoint");
    }
    for (double p : {p_appear, p_disappear, p_transform}) {
        if (!(p >= 0.0 && p <= 1.0)) fail("trend probabilities must lie in [0,1]");
    }
    if (p_appear + p_disappear + p_transform > 1.0 + 1e-9) fail("trend probabilities sum to more than 1");
    for (double period : {background_period, class_a_period, class_b_period}) {
        if (!(period > 0.0)) fail("texture periods must be positive");
    }
    if (!(brightness_shift >= 0.0) || !(noise_sigma >= 0.0)) fail("nuisance magnitudes must be non-negative");
}

inline void to_json(nlohmann::json& j, const IntensityBand& b) { j = nlohmann::json::array({b.lo, b.hi}); }
inline void from_json(const nlohmann::json& j, IntensityBand& b) {
    if (!j.is_array() || j.size() != 2) throw ConfigError("scene spec: bands are [lo, hi] pairs");
    b.lo = j[0].get<double>();
    b.hi = j[1].get<double>();
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
    j = nlohmann::json{{"height", s.height},
                       {"width", s.width},
                       {"min_shapes", s.min_shapes},
                       {"max_shapes", s.max_shapes},
                       {"min_size", s.min_size},
                       {"max_size", s.max_size},
                       {"background", s.background},
                       {"class_a", s.class_a},
                       {"class_b", s.class_b},
                       {"background_period", s.background_period},
                       {"class_a_period", s.class_a_period},
                       {"class_b_period", s.class_b_period},
                       {"p_appear", s.p_appear},
                       {"p_disappear", s.p_disappear},
                       {"p_transform", s.p_transform},
                       {"brightness_shift", s.brightness_shift},
                       {"noise_sigma", s.noise_sigma}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, SceneSpec& s) {
    if (!j.is_object()) throw ConfigError("scene spec must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        const auto& v = it.value();
        try {
            if (k == "height") s.height = v.get<std::size_t>();
            else if (k == "width") s.width = v.get<std::size_t>();
            else if (k == "min_shapes") s.min_shapes = v.get<std::size_t>();
            else if (k == "max_shapes") s.max_shapes = v.get<std::size_t>();
            else if (k == "min_size") s.min_size = v.get<std::size_t>();
            else if (k == "max_size") s.max_size = v.get<std::size_t>();
            else if (k == "background") s.background = v.get<IntensityBand>();
            else if (k == "class_a") s.class_a = v.get<IntensityBand>();
            else if (k == "class_b") s.class_b = v.get<IntensityBand>();
            else if (k == "background_period") s.background_period = v.get<double>();
            else if (k == "class_a_period") s.class_a_period = v.get<double>();
            else if (k == "class_b_period") s.class_b_period = v.get<double>();
            else if (k == "p_appear") s.p_appear = v.get<double>();
            else if (k == "p_disappear") s.p_disappear = v.get<double>();
            else if (k == "p_transform") s.p_transform = v.get<double>();
            else if (k == "brightness_shift") s.brightness_shift = v.get<double>();
            else if (k == "noise_sigma") s.noise_sigma = v.get<double>();
            else throw ConfigError("scene spec: unknown key '" + k + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("scene spec: bad value for '" + k + "': " + e.what());
        }
    }
    s.validate();
}

/// Independent per-item seed derived from a master seed (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace detail {

enum class ShapeClass { a, b };

struct PlacedShape {
    std::size_t y0, x0, h, w;
    bool ellipse;
    Trend trend;
    ShapeClass first, second;  // appearance in each frame (meaningful where present)

    bool contains(std::size_t y, std::size_t x) const {
        if (y < y0 || y >= y0 + h || x < x0 || x >= x0 + w) return false;
        if (!ellipse) return true;
        const double cy = y0 + (h - 1) / 2.0, cx = x0 + (w - 1) / 2.0;
        const double ry = h / 2.0, rx = w / 2.0;
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    }
    bool in_frame1() const { return trend != Trend::appear; }
    bool in_frame2() const { return trend != Trend::disappear; }
};

struct ClassLook {
    double level;  // base intensity inside the band
    double phase;
};

}  // namespace detail

/// Draws one bi-temporal scene: textured background, non-overlapping
/// rectangles/ellipses of two appearance classes, each assigned a trend.
/// Labels come from the geometry; per-frame brightness shift and noise
/// follow.
inline SamplePair generate(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    auto pick = [&](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };

    const std::size_t H = spec.height, W = spec.width;
    const std::size_t count = pick(spec.min_shapes, spec.max_shapes);
    std::vector<detail::PlacedShape> shapes;
    for (std::size_t s = 0; s < count; ++s) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            detail::PlacedShape c{};
            c.h = pick(spec.min_size, spec.max_size);
            c.w = pick(spec.min_size, spec.max_size);
            c.y0 = pick(1, H - c.h - 1);
            c.x0 = pick(1, W - c.w - 1);
            c.ellipse = unit(rng) < 0.5;
            // one pixel gap between bounding boxes
            placed = std::none_of(shapes.begin(), shapes.end(), [&](const detail::PlacedShape& o) {
                return c.y0 < o.y0 + o.h + 1 && o.y0 < c.y0 + c.h + 1 && c.x0 < o.x0 + o.w + 1 && o.x0 < c.x0 + c.w + 1;
            });
            if (placed) shapes.push_back(c);
        }
        if (!placed) throw GenerationError("could not place shape " + std::to_string(s) + " after 100 attempts", seed);
    }
    for (auto& s : shapes) {
        const double u = unit(rng);
        if (u < spec.p_appear) s.trend = Trend::appear;
        else if (u < spec.p_appear + spec.p_disappear) s.trend = Trend::disappear;
        else if (u < spec.p_appear + spec.p_disappear + spec.p_transform) s.trend = Trend::transform;
        else s.trend = Trend::unchanged;
        s.first = unit(rng) < 0.5 ? detail::ShapeClass::a : detail::ShapeClass::b;
        s.second = s.trend == Trend::transform
                       ? (s.first == detail::ShapeClass::a ? detail::ShapeClass::b : detail::ShapeClass::a)
                       : s.first;
    }

    // Texture amplitudes keep each class inside its band.
    const double bg_amp = (spec.background.hi - spec.background.lo) / 2.0;
    const double bg_mid = (spec.background.hi + spec.background.lo) / 2.0;
    const double bg_phase_y = uniform(0.0, 2.0 * M_PI), bg_phase_x = uniform(0.0, 2.0 * M_PI);
    auto class_look = [&](const IntensityBand& band) {
        const double amp = (band.hi - band.lo) / 4.0;
        return detail::ClassLook{uniform(band.lo + amp, band.hi - amp), uniform(0.0, 2.0 * M_PI)};
    };
    std::vector<detail::ClassLook> look_a, look_b;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
        look_a.push_back(class_look(spec.class_a));
        look_b.push_back(class_look(spec.class_b));
    }

    auto background_at = [&](std::size_t y, std::size_t x) {
        const double k = 2.0 * M_PI / spec.background_period;
        const double v = 0.5 * std::sin(k * y + bg_phase_y) + 0.5 * std::sin(0.7 * k * x + bg_phase_x);
        return bg_mid + bg_amp * 0.9 * v;
    };
    auto shape_at = [&](std::size_t idx, detail::ShapeClass cls, std::size_t y, std::size_t x) {
        if (cls == detail::ShapeClass::a) {
            // diagonal stripes
            const auto& l = look_a[idx];
            const double amp = (spec.class_a.hi - spec.class_a.lo) / 4.0;
            return l.level + amp * std::sin(2.0 * M_PI * (x + y) / spec.class_a_period + l.phase);
        }
        // fine checker
        const auto& l = look_b[idx];
        const double amp = (spec.class_b.hi - spec.class_b.lo) / 4.0;
        const double k = 2.0 * M_PI / spec.class_b_period;
        return l.level + amp * std::sin(k * x + l.phase) * std::sin(k * y);
    };

    SamplePair pair;
    pair.seed = seed;
    pair.t1 = Tensor(Shape{3, H, W});
    pair.t2 = Tensor(Shape{3, H, W});
    pair.change_label = ChangeMap(H, W);
    pair.trend_label = TrendMap(H, W);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int frame = 0; frame < 2; ++frame) {
        Tensor& img = frame == 0 ? pair.t1 : pair.t2;
        const double shift = uniform(-spec.brightness_shift, spec.brightness_shift);
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                double v = background_at(y, x);
                for (std::size_t s = 0; s < shapes.size(); ++s) {
                    const auto& sh = shapes[s];
                    const bool present = frame == 0 ? sh.in_frame1() : sh.in_frame2();
                    if (present && sh.contains(y, x)) {
                        v = shape_at(s, frame == 0 ? sh.first : sh.second, y, x);
                        break;
                    }
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    const double px = v + shift + spec.noise_sigma * noise(rng);
                    img[(c * H + y) * W + x] = static_cast<float>(std::clamp(px, 0.0, 1.0));
                }
            }
        }
    }
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            for (const auto& sh : shapes) {
                if (sh.contains(y, x)) {
                    (*pair.trend_label)(y, x) = static_cast<std::uint8_t>(sh.trend);
                    pair.change_label(y, x) = sh.trend != Trend::unchanged;
                    break;
                }
            }
        }
    }
    return pair;
}

// ---------------------------------------------------------------------------
// Paired augmentation

/// One jointly sampled geometric transform: square crop, then k quarter
/// turns counter-clockwise, then optional flips.
struct AugmentDraw {
    std::size_t crop = 0;  // side length; 0 = no crop (requires a square image for odd turns)
    std::size_t y0 = 0, x0 = 0;
    int quarter_turns = 0;
    bool hflip = false;
    bool vflip = false;
};

inline AugmentDraw draw_augment(std::size_t height, std::size_t width, std::size_t crop, std::uint64_t seed) {
    if (crop == 0 || crop > height || crop > width) {
        throw ConfigError("augment: crop size " + std::to_string(crop) + " does not fit " + std::to_string(height) +
                          "x" + std::to_string(width));
    }
    std::mt19937_64 rng(seed);
    AugmentDraw d;
    d.crop = crop;
    d.y0 = std::uniform_int_distribution<std::size_t>(0, height - crop)(rng);
    d.x0 = std::uniform_int_distribution<std::size_t>(0, width - crop)(rng);
    d.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
    d.hflip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    d.vflip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    return d;
}

namespace detail {

// Source coordinate inside the crop window for output pixel (y, x) of an
// nh x nw output. Odd quarter turns only occur for square windows.
inline std::pair<std::size_t, std::size_t> augment_source(const AugmentDraw& d, std::size_t nh, std::size_t nw,
                                                          std::size_t y, std::size_t x) {
    if (d.vflip) y = nh - 1 - y;
    if (d.hflip) x = nw - 1 - x;
    for (int t = 0; t < d.quarter_turns; ++t) {
        // inverse of one counter-clockwise quarter turn
        const std::size_t sy = x, sx = nh - 1 - y;
        y = sy;
        x = sx;
    }
    return {d.y0 + y, d.x0 + x};
}

}  // namespace detail

/// Applies the same transform to both images and both label maps.
inline SamplePair apply_augment(const SamplePair& in, const AugmentDraw& d) {
    const std::size_t H = in.height(), W = in.width();
    const std::size_t nh = d.crop == 0 ? H : d.crop;
    const std::size_t nw = d.crop == 0 ? W : d.crop;
    if (nh != nw && d.quarter_turns % 2 != 0) throw ConfigError("augment: quarter turns need a square window");
    if (d.y0 + nh > H || d.x0 + nw > W) throw ConfigError("augment: crop window exceeds image");
    SamplePair out;
    out.seed = in.seed;
    out.t1 = Tensor(Shape{3, nh, nw});
    out.t2 = Tensor(Shape{3, nh, nw});
    out.change_label = ChangeMap(nh, nw);
    if (in.trend_label) out.trend_label = TrendMap(nh, nw);
    for (std::size_t y = 0; y < nh; ++y) {
        for (std::size_t x = 0; x < nw; ++x) {
            const auto [sy, sx] = detail::augment_source(d, nh, nw, y, x);
            for (std::size_t c = 0; c < 3; ++c) {
                out.t1[(c * nh + y) * nw + x] = in.t1[(c * H + sy) * W + sx];
                out.t2[(c * nh + y) * nw + x] = in.t2[(c * H + sy) * W + sx];
            }
            out.change_label(y, x) = in.change_label(sy, sx);
            if (in.trend_label) (*out.trend_label)(y, x) = (*in.trend_label)(sy, sx);
        }
    }
    return out;
}

/// Random paired crop/rotation/flip. `crop` must fit the image and be a
/// multiple of `divisor` (the network's spatial divisor).
inline SamplePair augment(const SamplePair& pair, std::uint64_t seed, std::size_t crop, std::size_t divisor = 1) {
    if (divisor == 0 || crop % divisor != 0) {
        throw ConfigError("augment: crop size " + std::to_string(crop) + " is not a multiple of " +
                          std::to_string(divisor));
    }
    return apply_augment(pair, draw_augment(pair.height(), pair.width(), crop, seed));
}

}  // namespace trendmatch
