#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "trendmatch/trend.hpp"

namespace trendmatch {

struct Confusion {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    Confusion& operator+=(const Confusion& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
    bool operator==(const Confusion&) const = default;
};

inline Confusion operator+(Confusion a, const Confusion& b) { return a += b; }

struct MetricRow {
    std::string tag;  // "C", "A", "D", "T", "change_gcd", ...
    double precision = 0, recall = 0, f1 = 0, iou = 0, oa = 0;
    bool degenerate = false;  // some ratio was 0/0 and reported as 0
    Confusion counts;
};

/// Adds the pixelwise confusion of two binary maps into `conf`.
template <typename Tag>
void accumulate(Confusion& conf, const CodeMap<Tag>& pred, const CodeMap<Tag>& truth) {
    if (pred.height != truth.height || pred.width != truth.width) {
        throw std::invalid_argument("accumulate: prediction and truth extents differ");
    }
    Confusion local;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto p = pred.values[i], t = truth.values[i];
        if (p > 1 || t > 1) throw std::invalid_argument("accumulate: maps must be binary");
        if (p) {
            ++(t ? local.tp : local.fp);
        } else {
            ++(t ? local.fn : local.tn);
        }
    }
    conf += local;
}

/// Precision, recall, F1, IoU and overall accuracy of a confusion.
inline MetricRow finalize(const Confusion& c, std::string tag = "") {
    if (c.total() == 0) throw std::invalid_argument("finalize: empty confusion");
    MetricRow r;
    r.tag = std::move(tag);
    r.counts = c;
    auto ratio = [&r](double num, double den) {
        if (den == 0.0) {
            r.degenerate = true;
            return 0.0;
        }
        return num / den;
    };
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
    r.precision = ratio(tp, tp + fp);
    r.recall = ratio(tp, tp + fn);
    r.f1 = ratio(2.0 * r.precision * r.recall, r.precision + r.recall);
    r.iou = ratio(tp, tp + fp + fn);
    r.oa = (tp + tn) / static_cast<double>(c.total());
    return r;
}

/// Per-class one-vs-rest confusions of trend maps: index 0 is the change row
/// (any trend vs. unchanged), then appear, disappear, transform.
struct TrendConfusion {
    std::array<Confusion, 4> rows;

    TrendConfusion& operator+=(const TrendConfusion& o) {
        for (std::size_t k = 0; k < rows.size(); ++k) rows[k] += o.rows[k];
        return *this;
    }
    bool operator==(const TrendConfusion&) const = default;
};

inline constexpr std::array<const char*, 4> kTrendTags = {"C", "A", "D", "T"};

inline void accumulate_trend(TrendConfusion& conf, const TrendMap& pred, const TrendMap& truth) {
    if (pred.height != truth.height || pred.width != truth.width) {
        throw std::invalid_argument("per_trend: prediction and truth extents differ");
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto p = pred.values[i], t = truth.values[i];
        if (p > 3 || t > 3) throw std::invalid_argument("per_trend: trend codes must be in {0,1,2,3}");
        for (std::uint8_t k = 0; k < 4; ++k) {
            const bool pp = k == 0 ? p != 0 : p == k;
            const bool tt = k == 0 ? t != 0 : t == k;
            auto& c = conf.rows[k];
            if (pp) {
                ++(tt ? c.tp : c.fp);
            } else {
                ++(tt ? c.fn : c.tn);
            }
        }
    }
}

inline std::vector<MetricRow> finalize_trend(const TrendConfusion& conf) {
    std::vector<MetricRow> rows;
    for (std::size_t k = 0; k < 4; ++k) rows.push_back(finalize(conf.rows[k], kTrendTags[k]));
    return rows;
}

/// Rows C, A, D, T for one pair of trend maps.
inline std::vector<MetricRow> per_trend(const TrendMap& pred, const TrendMap& truth) {
    TrendConfusion conf;
    accumulate_trend(conf, pred, truth);
    return finalize_trend(conf);
}

// ---------------------------------------------------------------------------
// Reports. Values are percentages with two decimals.

inline std::string percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

inline nlohmann::ordered_json metric_json(const MetricRow& r) {
    auto pct = [](double v) { return std::stod(percent(v)); };
    nlohmann::ordered_json j;
    j["P"] = pct(r.precision);
    j["R"] = pct(r.recall);
    j["F"] = pct(r.f1);
    j["IoU"] = pct(r.iou);
    j["OA"] = pct(r.oa);
    return j;
}

inline std::string metric_table(const std::vector<MetricRow>& rows, const std::string& first_column = "Class") {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %8s %8s\n", first_column.c_str(), "P", "R", "F", "IoU", "OA");
    os << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %8s %8s%s\n", r.tag.c_str(), percent(r.precision).c_str(),
                      percent(r.recall).c_str(), percent(r.f1).c_str(), percent(r.iou).c_str(), percent(r.oa).c_str(),
                      r.degenerate ? "  (degenerate)" : "");
        os << line;
    }
    return os.str();
}

}  // namespace trendmatch
