#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "trendmatch/adam.hpp"
#include "trendmatch/distances.hpp"
#include "trendmatch/network.hpp"
#include "trendmatch/supervision.hpp"

namespace trendmatch {

struct Schedule {
    double decay_factor = 0.1;
    std::size_t decay_every = 60;  // epochs

    double lr_at(double base_lr, std::size_t epoch) const {
        return base_lr * std::pow(decay_factor, static_cast<double>(epoch / decay_every));
    }
    bool operator==(const Schedule&) const = default;
};

struct AugmentConfig {
    bool enabled = true;
    std::size_t crop = 64;
    bool operator==(const AugmentConfig&) const = default;
};

/// Everything a training run needs besides the data. Full-size values are
/// reachable by config; the defaults are the desk-scale regimen.
struct RunConfig {
    NetConfig net;
    AdamHyper optimizer;
    Schedule schedule;
    std::size_t batch_size = 16;
    std::size_t epochs = 60;
    std::size_t max_steps = 0;  // stop after this many optimizer steps; 0 = no limit
    LossWeights loss_weights;
    double threshold = 0.5;
    std::uint64_t seed = 0;
    AugmentConfig augment;
    DistanceKind gcd_distance = DistanceKind::softmatch;
    std::string log_csv;  // empty: next to the output checkpoint

    double tau() const { return net.tau; }

    void validate() const {
        net.validate();
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (!(optimizer.lr > 0.0)) fail("optimizer.lr must be positive");
        if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) fail("optimizer.beta1 must lie in [0,1)");
        if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) fail("optimizer.beta2 must lie in [0,1)");
        if (!(optimizer.epsilon > 0.0)) fail("optimizer.eps must be positive");
        if (!(schedule.decay_factor > 0.0 && schedule.decay_factor <= 1.0)) fail("schedule.decay_factor must lie in (0,1]");
        if (schedule.decay_every == 0) fail("schedule.decay_every must be positive");
        if (batch_size == 0) fail("batch_size must be positive");
        if (epochs == 0) fail("epochs must be positive");
        for (double w : {loss_weights.gcd, loss_weights.tcd, loss_weights.bg}) {
            if (!(w >= 0.0) || !std::isfinite(w)) fail("loss weights must be finite and non-negative");
        }
        if (!(threshold > 0.0 && threshold < 1.0)) fail("threshold must lie in (0,1)");
        if (augment.enabled) {
            if (augment.crop == 0 || augment.crop % net.spatial_divisor() != 0) {
                fail("augment.crop must be a positive multiple of " + std::to_string(net.spatial_divisor()));
            }
        }
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
        }
    }
}

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config key '" + (where.empty() ? "" : where + ".") + key + "': " + e.what());
    }
}

}  // namespace detail

/// Parses and validates a run config. Missing keys keep their defaults;
/// unknown keys and out-of-range values raise ConfigError.
inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail::read_key;
    RunConfig c;
    detail::reject_unknown(j, "", {"net", "tau", "optimizer", "schedule", "batch_size", "epochs", "max_steps",
                                   "loss_weights", "threshold", "seed", "augment", "gcd_distance", "log_csv"});
    if (j.contains("net")) {
        const auto& n = j["net"];
        detail::reject_unknown(n, "net", {"depth", "base_channels", "feature_channels", "use_batchnorm"});
        read_key(n, "depth", c.net.depth, "net");
        read_key(n, "base_channels", c.net.base_channels, "net");
        read_key(n, "feature_channels", c.net.feature_channels, "net");
        read_key(n, "use_batchnorm", c.net.use_batchnorm, "net");
    }
    read_key(j, "tau", c.net.tau, "");
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        detail::reject_unknown(o, "optimizer", {"lr", "beta1", "beta2", "eps"});
        read_key(o, "lr", c.optimizer.lr, "optimizer");
        read_key(o, "beta1", c.optimizer.beta1, "optimizer");
        read_key(o, "beta2", c.optimizer.beta2, "optimizer");
        read_key(o, "eps", c.optimizer.epsilon, "optimizer");
    }
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        detail::reject_unknown(s, "schedule", {"decay_factor", "decay_every"});
        read_key(s, "decay_factor", c.schedule.decay_factor, "schedule");
        read_key(s, "decay_every", c.schedule.decay_every, "schedule");
    }
    read_key(j, "batch_size", c.batch_size, "");
    read_key(j, "epochs", c.epochs, "");
    read_key(j, "max_steps", c.max_steps, "");
    if (j.contains("loss_weights")) {
        const auto& w = j["loss_weights"];
        detail::reject_unknown(w, "loss_weights", {"gcd", "tcd", "bg"});
        read_key(w, "gcd", c.loss_weights.gcd, "loss_weights");
        read_key(w, "tcd", c.loss_weights.tcd, "loss_weights");
        read_key(w, "bg", c.loss_weights.bg, "loss_weights");
    }
    read_key(j, "threshold", c.threshold, "");
    read_key(j, "seed", c.seed, "");
    if (j.contains("augment")) {
        const auto& a = j["augment"];
        detail::reject_unknown(a, "augment", {"enabled", "crop"});
        read_key(a, "enabled", c.augment.enabled, "augment");
        read_key(a, "crop", c.augment.crop, "augment");
    }
    if (j.contains("gcd_distance")) {
        std::string name;
        read_key(j, "gcd_distance", name, "");
        try {
            c.gcd_distance = parse_distance(name);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("gcd_distance: ") + e.what());
        }
    }
    read_key(j, "log_csv", c.log_csv, "");
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

inline nlohmann::ordered_json run_config_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["net"] = {{"depth", c.net.depth},
                {"base_channels", c.net.base_channels},
                {"feature_channels", c.net.feature_channels},
                {"use_batchnorm", c.net.use_batchnorm}};
    j["tau"] = c.net.tau;
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"eps", c.optimizer.epsilon}};
    j["schedule"] = {{"decay_factor", c.schedule.decay_factor}, {"decay_every", c.schedule.decay_every}};
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["max_steps"] = c.max_steps;
    j["loss_weights"] = {{"gcd", c.loss_weights.gcd}, {"tcd", c.loss_weights.tcd}, {"bg", c.loss_weights.bg}};
    j["threshold"] = c.threshold;
    j["seed"] = c.seed;
    j["augment"] = {{"enabled", c.augment.enabled}, {"crop", c.augment.crop}};
    j["gcd_distance"] = std::string(to_string(c.gcd_distance));
    j["log_csv"] = c.log_csv;
    return j;
}

}  // namespace trendmatch
