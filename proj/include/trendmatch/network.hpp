#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "trendmatch/ops.hpp"
#include "trendmatch/tensor.hpp"

namespace trendmatch {

/// Invalid configuration (bad field value, incompatible image extent).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct NetConfig {
    std::size_t depth = 3;           // encoder levels
    std::size_t base_channels = 16;  // width of the first level, doubled per level
    std::size_t feature_channels = 3;
    bool use_batchnorm = true;
    double tau = 0.1;

    void validate() const {
        if (depth < 2) throw ConfigError("net.depth must be >= 2, got " + std::to_string(depth));
        if (feature_channels != 3) {
            throw ConfigError("net.feature_channels must be 3, got " + std::to_string(feature_channels));
        }
        if (base_channels < feature_channels) {
            throw ConfigError("net.base_channels must be >= feature_channels, got " + std::to_string(base_channels));
        }
        if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("net.tau must be positive");
    }

    std::size_t width(std::size_t level) const { return base_channels << (level - 1); }  // level is 1-based
    std::size_t spatial_divisor() const { return std::size_t{1} << (depth - 1); }

    /// Rejects image extents the encoder cannot pool down evenly.
    void check_extent(std::size_t height, std::size_t width) const {
        const auto d = spatial_divisor();
        if (height == 0 || width == 0 || height % d != 0 || width % d != 0) {
            throw ConfigError("image extent " + std::to_string(height) + "x" + std::to_string(width) +
                              " is not divisible by " + std::to_string(d) + " (depth " + std::to_string(depth) + ")");
        }
    }

    bool operator==(const NetConfig&) const = default;
};

template <typename T>
struct TensorPair {
    BasicTensor<T> t1;
    BasicTensor<T> t2;
};

/// F_I (independent) and F_C (common) features, each a pair of [N,3,H,W] maps.
template <typename T>
struct Features {
    TensorPair<T> independent;
    TensorPair<T> common;
};

namespace detail {

template <typename T>
struct ConvUnit {
    BasicTensor<T> weight, bias, gamma, beta;
    NormStats<T> stats;
    std::size_t kernel = 3;

    BasicTensor<T> operator()(const BasicTensor<T>& x, bool training) {
        auto y = conv2d(x, weight, bias, 1, kernel / 2);
        if (gamma.defined()) {
            y = batchnorm(y, gamma, beta, stats, training);
        }
        return relu(y);
    }
};

template <typename T>
struct Convs {
    ConvUnit<T> first, second;
    BasicTensor<T> operator()(const BasicTensor<T>& x, bool training) { return second(first(x, training), training); }
};

template <typename T>
struct UpStage {
    ConvUnit<T> up;  // upsample followed by this unit
    Convs<T> fuse;
};

}  // namespace detail

/// Dual-encoder, triple-decoder U-shaped feature extractor.
///
/// A single encoder/decoder pair is applied to both images (shared weights).
/// A third decoder fuses the channel-concatenated encoder features of both
/// images. Three 1x1 heads project to 3 channels: one shared head for F_I and
/// one per stream for F_C.
template <typename T>
class BasicModel {
public:
    BasicModel() = default;

    static BasicModel init(const NetConfig& config, std::uint64_t seed) {
        config.validate();
        BasicModel m;
        m.config_ = config;
        std::mt19937_64 rng(seed);
        const std::size_t L = config.depth;
        const bool bn = config.use_batchnorm;

        for (std::size_t i = 1; i <= L; ++i) {
            const std::size_t in = i == 1 ? 3 : config.width(i - 1);
            m.encoder_.push_back(m.make_convs("encoder." + std::to_string(i), in, config.width(i), bn, rng));
        }
        // Decoder stages run from level L down to 2; stage i outputs width(i-1).
        for (std::size_t i = L; i >= 2; --i) {
            const std::size_t out = config.width(i - 1);
            const std::string p = "siamese_decoder." + std::to_string(i);
            detail::UpStage<T> s;
            s.up = m.make_unit(p + ".up", config.width(i), out, 3, bn, rng);
            s.fuse = m.make_convs(p + ".convs", 2 * out, out, bn, rng);
            m.siamese_decoder_.push_back(std::move(s));
        }
        for (std::size_t i = L; i >= 2; --i) {
            const std::size_t out = config.width(i - 1);
            const std::size_t up_in = i == L ? 2 * config.width(L) : config.width(i);
            const std::string p = "common_decoder." + std::to_string(i);
            detail::UpStage<T> s;
            s.up = m.make_unit(p + ".up", up_in, out, 3, bn, rng);
            s.fuse = m.make_convs(p + ".convs", 3 * out, out, bn, rng);
            m.common_decoder_.push_back(std::move(s));
        }
        const std::size_t c = config.feature_channels;
        m.head_independent_ = m.make_unit("head.independent", config.width(1), c, 1, false, rng);
        m.head_common_t1_ = m.make_unit("head.common_t1", 2 * config.width(1), c, 1, false, rng);
        m.head_common_t2_ = m.make_unit("head.common_t2", 2 * config.width(1), c, 1, false, rng);
        return m;
    }

    const NetConfig& config() const { return config_; }

    Features<T> forward(const BasicTensor<T>& t1, const BasicTensor<T>& t2, bool training) {
        detail::require_rank("forward", t1.shape(), 4);
        detail::require_same_shape("forward", t1.shape(), t2.shape());
        if (t1.dim(1) != 3) {
            throw ShapeError("forward", 1, "expected 3-channel images, got " + shape_str(t1.shape()));
        }
        config_.check_extent(t1.dim(2), t1.dim(3));

        auto e1 = encode(t1, training);
        auto e2 = encode(t2, training);
        auto d1 = decode_siamese(e1, training);
        auto d2 = decode_siamese(e2, training);

        std::vector<BasicTensor<T>> ec;
        ec.reserve(e1.size());
        for (std::size_t i = 0; i < e1.size(); ++i) {
            ec.push_back(concat_channels(e1[i], e2[i]));
        }
        auto dc = decode_common(ec, training);

        Features<T> f;
        f.independent.t1 = head(head_independent_, d1);
        f.independent.t2 = head(head_independent_, d2);
        f.common.t1 = head(head_common_t1_, concat_channels(d1, dc));
        f.common.t2 = head(head_common_t2_, concat_channels(d2, dc));
        return f;
    }

    /// All trainable tensors, in a fixed order.
    std::vector<BasicTensor<T>> parameters() const {
        std::vector<BasicTensor<T>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    const std::vector<std::pair<std::string, BasicTensor<T>>>& named_parameters() const { return params_; }

    /// Batch-norm running statistics, in a fixed order.
    const std::vector<std::pair<std::string, BasicTensor<T>>>& named_buffers() const { return buffers_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    /// Independent copy with identical values.
    BasicModel clone() const {
        BasicModel copy = *this;
        copy.remap([](const BasicTensor<T>& t) {
            auto c = t.clone();
            c.set_requires_grad(t.requires_grad());
            return c;
        });
        return copy;
    }

private:
    detail::ConvUnit<T> make_unit(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool bn,
                                  std::mt19937_64& rng) {
        detail::ConvUnit<T> u;
        u.kernel = k;
        u.weight = BasicTensor<T>::parameter(Shape{out, in, k, k});
        // Kaiming fan-in uniform: Var = bound^2 / 3 = 2 / fan_in.
        const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& w : u.weight.data()) w = static_cast<T>(dist(rng));
        u.bias = BasicTensor<T>::parameter(Shape{out}, T(0));
        params_.emplace_back(name + ".weight", u.weight);
        params_.emplace_back(name + ".bias", u.bias);
        if (bn) {
            u.gamma = BasicTensor<T>::parameter(Shape{out}, T(1));
            u.beta = BasicTensor<T>::parameter(Shape{out}, T(0));
            u.stats = NormStats<T>::identity(out);
            params_.emplace_back(name + ".gamma", u.gamma);
            params_.emplace_back(name + ".beta", u.beta);
            buffers_.emplace_back(name + ".running_mean", u.stats.mean);
            buffers_.emplace_back(name + ".running_var", u.stats.var);
        }
        return u;
    }

    detail::Convs<T> make_convs(const std::string& name, std::size_t in, std::size_t out, bool bn,
                                std::mt19937_64& rng) {
        detail::Convs<T> c;
        c.first = make_unit(name + ".0", in, out, 3, bn, rng);
        c.second = make_unit(name + ".1", out, out, 3, bn, rng);
        return c;
    }

    std::vector<BasicTensor<T>> encode(const BasicTensor<T>& image, bool training) {
        std::vector<BasicTensor<T>> feats;
        BasicTensor<T> x = image;
        for (std::size_t i = 0; i < encoder_.size(); ++i) {
            if (i > 0) x = maxpool2(x);
            x = encoder_[i](x, training);
            feats.push_back(x);
        }
        return feats;
    }

    // d_L = Convs(Up(e_L) ⊕ e_{L-1}); d_i = Convs(Up(d_{i+1}) ⊕ e_{i-1}); returns d_2.
    BasicTensor<T> decode(std::vector<detail::UpStage<T>>& stages, const std::vector<BasicTensor<T>>& enc,
                          bool training) {
        BasicTensor<T> x = enc.back();
        for (std::size_t s = 0; s < stages.size(); ++s) {
            const std::size_t skip = enc.size() - 2 - s;
            auto up = stages[s].up(upsample2(x), training);
            x = stages[s].fuse(concat_channels(up, enc[skip]), training);
        }
        return x;
    }

    BasicTensor<T> decode_siamese(const std::vector<BasicTensor<T>>& enc, bool training) {
        return decode(siamese_decoder_, enc, training);
    }
    BasicTensor<T> decode_common(const std::vector<BasicTensor<T>>& enc, bool training) {
        return decode(common_decoder_, enc, training);
    }

    static BasicTensor<T> head(const detail::ConvUnit<T>& h, const BasicTensor<T>& x) {
        return conv2d(x, h.weight, h.bias, 1, 0);
    }

    // Rebinds every tensor handle through `fn`, keeping units and registries in sync.
    template <typename Fn>
    void remap(Fn fn) {
        std::vector<std::pair<const void*, BasicTensor<T>>> seen;
        auto map = [&](BasicTensor<T>& t) {
            if (!t.defined()) return;
            for (auto& [key, replacement] : seen) {
                if (key == t.storage().get()) {
                    t = replacement;
                    return;
                }
            }
            auto r = fn(t);
            seen.emplace_back(t.storage().get(), r);
            t = r;
        };
        auto unit = [&](detail::ConvUnit<T>& u) {
            map(u.weight);
            map(u.bias);
            map(u.gamma);
            map(u.beta);
            map(u.stats.mean);
            map(u.stats.var);
        };
        for (auto& c : encoder_) {
            unit(c.first);
            unit(c.second);
        }
        for (auto* dec : {&siamese_decoder_, &common_decoder_}) {
            for (auto& s : *dec) {
                unit(s.up);
                unit(s.fuse.first);
                unit(s.fuse.second);
            }
        }
        unit(head_independent_);
        unit(head_common_t1_);
        unit(head_common_t2_);
        for (auto& [name, t] : params_) map(t);
        for (auto& [name, t] : buffers_) map(t);
    }

    NetConfig config_;
    std::vector<detail::Convs<T>> encoder_;
    std::vector<detail::UpStage<T>> siamese_decoder_;
    std::vector<detail::UpStage<T>> common_decoder_;
    detail::ConvUnit<T> head_independent_, head_common_t1_, head_common_t2_;
    std::vector<std::pair<std::string, BasicTensor<T>>> params_;
    std::vector<std::pair<std::string, BasicTensor<T>>> buffers_;
};

using Model = BasicModel<float>;

}  // namespace trendmatch
