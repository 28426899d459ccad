#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "trendmatch/parallel.hpp"
#include "trendmatch/png_io.hpp"
#include "trendmatch/synthdata.hpp"
#include "trendmatch/trend.hpp"

namespace trendmatch {

namespace fs = std::filesystem;

/// Display colors of the trend codes: unchanged black, appear blue,
/// disappear white, transform red.
inline constexpr std::array<std::array<std::uint8_t, 3>, 4> kTrendPalette = {{
    {0, 0, 0},
    {0, 0, 255},
    {255, 255, 255},
    {255, 0, 0},
}};

struct SplitRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool operator==(const SplitRange&) const = default;
};

struct Manifest {
    SceneSpec spec;
    std::uint64_t master_seed = 0;
    std::size_t count = 0;
    SplitRange train, val, test;
};

/// Which labels a reader may open. The training path uses change_only and
/// never touches trend/.
enum class LabelAccess { change_only, with_trend };

struct Dataset {
    std::vector<SamplePair> samples;
    std::optional<Manifest> manifest;
    bool has_trend = false;
};

inline std::string sample_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04zu.png", index);
    return buf;
}

// ---------------------------------------------------------------------------
// Raster conversions

inline Raster image_to_raster(const Tensor& img) {
    const std::size_t H = img.dim(1), W = img.dim(2);
    Raster r{W, H, 3, false, std::vector<std::uint8_t>(W * H * 3), {}};
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp<double>(img[(c * H + y) * W + x], 0.0, 1.0);
                r.pixels[(y * W + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return r;
}

inline Tensor raster_to_image(const Raster& r, const fs::path& origin) {
    if (r.indexed) throw DataError(origin.string() + ": expected a gray or RGB image, found a palette image");
    Tensor img(Shape{3, r.height, r.width});
    for (std::size_t y = 0; y < r.height; ++y) {
        for (std::size_t x = 0; x < r.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const std::size_t src = r.channels == 3 ? c : 0;
                img[(c * r.height + y) * r.width + x] = r.pixels[(y * r.width + x) * r.channels + src] / 255.0f;
            }
        }
    }
    return img;
}

inline Raster change_to_raster(const ChangeMap& m) {
    Raster r{m.width, m.height, 1, false, std::vector<std::uint8_t>(m.size()), {}};
    for (std::size_t i = 0; i < m.size(); ++i) r.pixels[i] = m.values[i] ? 255 : 0;
    return r;
}

inline ChangeMap raster_to_change(const Raster& r, const fs::path& origin) {
    if (r.channels != 1 || r.indexed) throw DataError(origin.string() + ": change labels must be 8-bit grayscale");
    ChangeMap m(r.height, r.width);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const auto v = r.pixels[i];
        if (v != 0 && v != 255) throw DataError(origin.string() + ": change label values must be 0 or 255");
        m.values[i] = v == 255;
    }
    return m;
}

inline Raster trend_to_raster(const TrendMap& m) {
    Raster r{m.width, m.height, 1, true, m.values, {}};
    r.palette.assign(kTrendPalette.begin(), kTrendPalette.end());
    return r;
}

/// Same map rendered as RGB with the trend palette.
inline Raster trend_to_rgb(const TrendMap& m) {
    Raster r{m.width, m.height, 3, false, std::vector<std::uint8_t>(m.size() * 3), {}};
    for (std::size_t i = 0; i < m.size(); ++i) {
        const auto& c = kTrendPalette.at(m.values[i]);
        std::copy(c.begin(), c.end(), r.pixels.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    return r;
}

inline TrendMap raster_to_trend(const Raster& r, const fs::path& origin) {
    if (r.channels != 1) throw DataError(origin.string() + ": trend labels must be palette-indexed");
    TrendMap m(r.height, r.width);
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (r.pixels[i] > 3) throw DataError(origin.string() + ": trend codes must be in 0..3");
        m.values[i] = r.pixels[i];
    }
    return m;
}

// ---------------------------------------------------------------------------
// Manifest

inline nlohmann::ordered_json manifest_json(const Manifest& m) {
    nlohmann::ordered_json j;
    j["format"] = "trendmatch-dataset";
    j["version"] = 1;
    j["spec"] = nlohmann::json(m.spec);
    j["master_seed"] = m.master_seed;
    j["count"] = m.count;
    j["splits"] = {{"train", {m.train.begin, m.train.end}},
                   {"val", {m.val.begin, m.val.end}},
                   {"test", {m.test.begin, m.test.end}}};
    return j;
}

inline Manifest parse_manifest(const nlohmann::json& j) {
    Manifest m;
    try {
        if (j.at("format") != "trendmatch-dataset" || j.at("version") != 1) {
            throw DataError("manifest: unsupported format");
        }
        m.spec = j.at("spec").get<SceneSpec>();
        m.master_seed = j.at("master_seed").get<std::uint64_t>();
        m.count = j.at("count").get<std::size_t>();
        auto range = [&](const char* k) {
            const auto& r = j.at("splits").at(k);
            return SplitRange{r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()};
        };
        m.train = range("train");
        m.val = range("val");
        m.test = range("test");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    if (m.train.begin != 0 || m.train.end != m.val.begin || m.val.end != m.test.begin || m.test.end != m.count) {
        throw DataError("manifest: split boundaries do not tile [0, count)");
    }
    return m;
}

/// Splits `count` items by fractions (train, val, test), rounding down for
/// val/test and giving the remainder to train.
inline Manifest make_manifest(const SceneSpec& spec, std::uint64_t seed, std::size_t count, double val_fraction,
                              double test_fraction) {
    if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction > 1.0) {
        throw ConfigError("split fractions must be non-negative and sum to at most 1");
    }
    const auto nval = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(count)));
    const auto ntest = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(count)));
    Manifest m{spec, seed, count, {}, {}, {}};
    m.train = {0, count - nval - ntest};
    m.val = {m.train.end, m.train.end + nval};
    m.test = {m.val.end, count};
    return m;
}

// ---------------------------------------------------------------------------
// Directory layout: t1/NNNN.png, t2/NNNN.png, change/NNNN.png, trend/NNNN.png,
// manifest.json.

inline void write_dataset(const std::vector<SamplePair>& pairs, const fs::path& dir,
                          const std::optional<Manifest>& manifest = std::nullopt) {
    std::error_code ec;
    for (const char* sub : {"t1", "t2", "change", "trend"}) {
        fs::create_directories(dir / sub, ec);
        if (ec) throw DataError("cannot create " + (dir / sub).string() + ": " + ec.message());
    }
    parallel_for(pairs.size(), [&](std::size_t i) {
        const auto& p = pairs[i];
        const auto name = sample_name(i);
        io::write_png(dir / "t1" / name, image_to_raster(p.t1));
        io::write_png(dir / "t2" / name, image_to_raster(p.t2));
        io::write_png(dir / "change" / name, change_to_raster(p.change_label));
        if (p.trend_label) io::write_png(dir / "trend" / name, trend_to_raster(*p.trend_label));
    });
    if (manifest) {
        std::ofstream out(dir / "manifest.json");
        if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
        out << manifest_json(*manifest).dump(2) << '\n';
    }
}

namespace detail {

inline std::set<std::string> png_names(const fs::path& dir) {
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename().string());
    }
    return names;
}

inline void require_same_names(const std::set<std::string>& expected, const std::set<std::string>& found,
                               const fs::path& dir) {
    for (const auto& n : expected) {
        if (!found.count(n)) throw DataError("missing file " + (dir / n).string());
    }
    for (const auto& n : found) {
        if (!expected.count(n)) throw DataError("unexpected extra file " + (dir / n).string());
    }
}

}  // namespace detail

inline std::optional<Manifest> read_manifest(const fs::path& dir) {
    const auto path = dir / "manifest.json";
    if (!fs::exists(path)) return std::nullopt;
    std::ifstream in(path);
    try {
        return parse_manifest(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// Loads a dataset directory. With LabelAccess::change_only the trend/
/// directory is never opened; with with_trend it is read when present and
/// `has_trend` reports whether it was.
inline Dataset read_dataset(const fs::path& dir, LabelAccess access = LabelAccess::with_trend) {
    for (const char* sub : {"t1", "t2", "change"}) {
        if (!fs::is_directory(dir / sub)) throw DataError("dataset is missing " + (dir / sub).string());
    }
    const auto names = detail::png_names(dir / "t1");
    detail::require_same_names(names, detail::png_names(dir / "t2"), dir / "t2");
    detail::require_same_names(names, detail::png_names(dir / "change"), dir / "change");

    Dataset ds;
    ds.manifest = read_manifest(dir);
    if (ds.manifest && ds.manifest->count != names.size()) {
        throw DataError("manifest lists " + std::to_string(ds.manifest->count) + " samples, found " +
                        std::to_string(names.size()));
    }
    if (access == LabelAccess::with_trend && fs::is_directory(dir / "trend")) {
        detail::require_same_names(names, detail::png_names(dir / "trend"), dir / "trend");
        ds.has_trend = true;
    }

    const std::vector<std::string> ordered(names.begin(), names.end());
    ds.samples.resize(ordered.size());
    parallel_for(ordered.size(), [&](std::size_t i) {
        const auto& n = ordered[i];
        SamplePair p;
        p.t1 = raster_to_image(io::read_png(dir / "t1" / n), dir / "t1" / n);
        p.t2 = raster_to_image(io::read_png(dir / "t2" / n), dir / "t2" / n);
        p.change_label = raster_to_change(io::read_png(dir / "change" / n), dir / "change" / n);
        if (ds.has_trend) p.trend_label = raster_to_trend(io::read_png(dir / "trend" / n), dir / "trend" / n);
        if (p.t1.shape() != p.t2.shape() || p.t1.dim(1) != p.height() || p.t1.dim(2) != p.width() ||
            (p.trend_label && (p.trend_label->height != p.height() || p.trend_label->width != p.width()))) {
            throw DataError("sample " + n + ": extents differ across subdirectories");
        }
        if (ds.manifest) p.seed = derive_seed(ds.manifest->master_seed, i);
        ds.samples[i] = std::move(p);
    });
    return ds;
}

/// Training-side reader: images and change labels only.
inline Dataset read_training_set(const fs::path& dir) { return read_dataset(dir, LabelAccess::change_only); }

/// Generates `manifest.count` samples with per-index seeds.
inline std::vector<SamplePair> generate_dataset(const Manifest& manifest) {
    std::vector<SamplePair> pairs(manifest.count);
    parallel_for(manifest.count, [&](std::size_t i) {
        pairs[i] = generate(manifest.spec, derive_seed(manifest.master_seed, i));
    });
    return pairs;
}

}  // namespace trendmatch
