#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "trendmatch/adam.hpp"
#include "trendmatch/checkpoint.hpp"
#include "trendmatch/config.hpp"
#include "trendmatch/dataset_io.hpp"
#include "trendmatch/metrics.hpp"
#include "trendmatch/network.hpp"
#include "trendmatch/supervision.hpp"
#include "trendmatch/synthdata.hpp"
#include "trendmatch/trend.hpp"

namespace trendmatch {

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Batching

struct Batch {
    Tensor t1, t2, label;
};

inline Batch stack_batch(const std::vector<SamplePair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("stack_batch: empty batch");
    const std::size_t N = pairs.size(), H = pairs[0].height(), W = pairs[0].width(), HW = H * W;
    Batch b{Tensor(Shape{N, 3, H, W}), Tensor(Shape{N, 3, H, W}), Tensor(Shape{N, 1, H, W})};
    for (std::size_t n = 0; n < N; ++n) {
        const auto& p = pairs[n];
        if (p.height() != H || p.width() != W) throw DataError("stack_batch: samples differ in extent");
        std::copy(p.t1.data().begin(), p.t1.data().end(), b.t1.data().begin() + n * 3 * HW);
        std::copy(p.t2.data().begin(), p.t2.data().end(), b.t2.data().begin() + n * 3 * HW);
        for (std::size_t i = 0; i < HW; ++i) b.label[n * HW + i] = p.change_label.values[i];
    }
    return b;
}

// ---------------------------------------------------------------------------
// Inference

struct Inference {
    std::vector<ChangeMap> change;  // GCD branch
    std::vector<TrendMap> trend;    // TCD branch
    std::vector<std::vector<float>> bg1, bg2;  // s_bg of F_I per stream, row-major H x W
};

inline constexpr std::size_t kInferBatch = 16;

/// Runs the model in eval mode over `samples`. Each sample's result depends
/// only on that sample.
inline Inference infer(Model& model, const std::vector<SamplePair>& samples, DistanceKind gcd, double threshold,
                       bool with_background = false) {
    NoGradGuard guard;
    Inference out;
    const double tau = model.config().tau;
    for (std::size_t begin = 0; begin < samples.size(); begin += kInferBatch) {
        const std::size_t end = std::min(samples.size(), begin + kInferBatch);
        std::vector<SamplePair> chunk(samples.begin() + static_cast<long>(begin), samples.begin() + static_cast<long>(end));
        auto b = stack_batch(chunk);
        auto f = model.forward(b.t1, b.t2, false);
        for (auto& m : decode_change(distance(gcd, f.common.t1, f.common.t2, tau), threshold)) {
            out.change.push_back(std::move(m));
        }
        for (auto& m : decode_trend(f.independent, kBackgroundChannel)) out.trend.push_back(std::move(m));
        if (with_background) {
            for (auto* fi : {&f.independent.t1, &f.independent.t2}) {
                auto s = softmax_tau(*fi, tau);
                const std::size_t HW = s.dim(2) * s.dim(3), C = s.dim(1);
                for (std::size_t n = 0; n < s.dim(0); ++n) {
                    const float* p = s.data().data() + (n * C + kBackgroundChannel) * HW;
                    (fi == &f.independent.t1 ? out.bg1 : out.bg2).emplace_back(p, p + HW);
                }
            }
        }
    }
    return out;
}

struct EvalReport {
    std::vector<MetricRow> trend_rows;  // C, A, D, T; empty without trend labels
    MetricRow change_gcd;
    double disagreement = 0.0;  // GCD change map vs. change implied by the trend map
    bool has_trend = false;
};

/// Scores precomputed maps against the samples' labels. `evaluate` is this
/// applied to the model's inference; tests feed labels in directly.
inline EvalReport score(const Inference& inf, const std::vector<SamplePair>& samples) {
    if (samples.empty()) throw DataError("evaluate: no samples");
    if (inf.change.size() != samples.size() || inf.trend.size() != samples.size()) {
        throw std::invalid_argument("score: prediction count does not match sample count");
    }
    EvalReport r;
    r.has_trend = std::all_of(samples.begin(), samples.end(), [](const SamplePair& p) { return p.trend_label.has_value(); });
    Confusion change;
    TrendConfusion trend;
    std::size_t diff_pixels = 0, pixels = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        accumulate(change, inf.change[i], samples[i].change_label);
        if (r.has_trend) accumulate_trend(trend, inf.trend[i], *samples[i].trend_label);
        const auto implied = trend_to_change(inf.trend[i]);
        diff_pixels += static_cast<std::size_t>(std::llround(disagreement(inf.change[i], implied) * implied.size()));
        pixels += implied.size();
    }
    r.change_gcd = finalize(change, "change_gcd");
    if (r.has_trend) r.trend_rows = finalize_trend(trend);
    r.disagreement = static_cast<double>(diff_pixels) / static_cast<double>(pixels);
    return r;
}

inline EvalReport evaluate(Model& model, const std::vector<SamplePair>& samples, DistanceKind gcd, double threshold) {
    if (samples.empty()) throw DataError("evaluate: no samples");
    return score(infer(model, samples, gcd, threshold), samples);
}

inline nlohmann::ordered_json eval_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    for (const auto& row : r.trend_rows) j[row.tag] = metric_json(row);
    j["change_gcd"] = metric_json(r.change_gcd);
    return j;
}

inline std::string eval_text(const EvalReport& r) {
    std::vector<MetricRow> rows = r.trend_rows;
    rows.push_back(r.change_gcd);
    std::ostringstream os;
    os << metric_table(rows);
    char line[96];
    std::snprintf(line, sizeof line, "disagreement %s%%\n", percent(r.disagreement).c_str());
    os << line;
    return os.str();
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    std::filesystem::path out;  // final checkpoint; the best one goes next to it
    std::optional<std::filesystem::path> resume;
    std::ostream* log = nullptr;  // per-epoch progress lines, may be null
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    std::size_t steps = 0;  // cumulative
    double lr = 0.0;
    double l_gcd = 0.0, l_tcd = 0.0, l_bg = 0.0, total = 0.0;  // means over the epoch's steps
    double val_f = -1.0;  // GCD change F on validation, -1 without a validation split
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t steps = 0;
    double best_val_f = -1.0;
    std::filesystem::path final_checkpoint, best_checkpoint;
};

inline std::filesystem::path best_checkpoint_path(const std::filesystem::path& out) {
    auto p = out;
    p.replace_extension(".best" + (out.has_extension() ? out.extension().string() : std::string(".tcdw")));
    return p;
}

inline std::filesystem::path csv_log_path(const RunConfig& cfg, const std::filesystem::path& out) {
    if (!cfg.log_csv.empty()) return cfg.log_csv;
    auto p = out;
    p.replace_extension(".csv");
    return p;
}

namespace detail {

struct Splits {
    std::vector<SamplePair> train, val;
};

inline Splits split_for_training(const Dataset& ds) {
    Splits s;
    if (!ds.manifest) {
        s.train = ds.samples;
        return s;
    }
    const auto& m = *ds.manifest;
    s.train.assign(ds.samples.begin() + static_cast<long>(m.train.begin), ds.samples.begin() + static_cast<long>(m.train.end));
    s.val.assign(ds.samples.begin() + static_cast<long>(m.val.begin), ds.samples.begin() + static_cast<long>(m.val.end));
    return s;
}

inline std::string rng_bytes(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void csv_row(std::ostream& os, const EpochRecord& e) {
    char line[256];
    std::snprintf(line, sizeof line, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", e.epoch, e.steps, e.lr, e.l_gcd,
                  e.l_tcd, e.l_bg, e.total, e.val_f, e.seconds);
    os << line;
}

}  // namespace detail

inline constexpr const char* kCsvHeader = "epoch,steps,lr,l_gcd,l_tcd,l_bg,total,val_change_f,seconds\n";

/// Trains on the manifest's train split (or every sample without a manifest)
/// using change labels only. Writes the final checkpoint to `opt.out`, the
/// best-by-validation one next to it, and a per-epoch CSV log.
inline TrainResult train(const RunConfig& cfg, const Dataset& data, const TrainOptions& opt) {
    cfg.validate();
    auto splits = detail::split_for_training(data);
    if (splits.train.empty()) throw DataError("training split is empty");
    const std::size_t H = splits.train[0].height(), W = splits.train[0].width();
    cfg.net.check_extent(H, W);
    const std::size_t crop = cfg.augment.enabled ? cfg.augment.crop : 0;
    if (crop > H || crop > W) {
        throw ConfigError("augment.crop " + std::to_string(crop) + " exceeds image extent " + std::to_string(H) + "x" +
                          std::to_string(W));
    }

    Model model;
    AdamState<float> adam;
    std::mt19937_64 rng(derive_seed(cfg.seed, 1));
    std::size_t start_epoch = 0;
    double best_f = -1.0;
    if (opt.resume) {
        const auto ck = load_checkpoint(*opt.resume);
        if (!(ck.net == cfg.net)) throw ConfigError("resume checkpoint was trained with a different net config");
        if (ck.gcd_distance != cfg.gcd_distance) throw ConfigError("resume checkpoint uses a different gcd_distance");
        model = model_from(ck);
        adam = adam_from(ck, model, cfg.optimizer);
        std::istringstream is(ck.rng_state);
        is >> rng;
        if (!is) throw DataError(opt.resume->string() + ": bad RNG state");
        start_epoch = ck.epoch;
        best_f = ck.best_val_f;
    } else {
        model = Model::init(cfg.net, derive_seed(cfg.seed, 0));
        adam = AdamState<float>(model.parameters(), cfg.optimizer);
    }
    auto params = model.parameters();

    TrainResult result;
    result.final_checkpoint = opt.out;
    result.best_checkpoint = best_checkpoint_path(opt.out);
    result.best_val_f = best_f;
    result.steps = adam.step;

    const auto csv_path = csv_log_path(cfg, opt.out);
    if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
    std::ofstream csv(csv_path, opt.resume ? std::ios::app : std::ios::trunc);
    if (!csv) throw DataError("cannot write " + csv_path.string());
    if (!opt.resume) csv << kCsvHeader;

    const std::size_t divisor = cfg.net.spatial_divisor();
    std::vector<std::size_t> order(splits.train.size());
    bool stop = false;
    for (std::size_t epoch = start_epoch; epoch < cfg.epochs && !stop; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        adam.hyper.lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = adam.hyper.lr;
        std::size_t steps_this_epoch = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::vector<SamplePair> chunk;
            for (std::size_t k = begin; k < end; ++k) {
                const auto& p = splits.train[order[k]];
                const std::uint64_t aug_seed = rng();
                chunk.push_back(cfg.augment.enabled ? augment(p, aug_seed, crop, divisor) : p);
            }
            auto b = stack_batch(chunk);
            auto f = model.forward(b.t1, b.t2, true);
            auto r = total_loss(f, b.label, cfg.loss_weights, cfg.tau(), cfg.gcd_distance);
            if (!std::isfinite(r.weighted)) {
                current_tape<float>().clear();
                throw DivergenceError("total loss is not finite at epoch " + std::to_string(epoch + 1) + ", step " +
                                      std::to_string(adam.step + 1));
            }
            backward(r.total);
            adam_step(params, adam);
            rec.l_gcd += r.l_gcd;
            rec.l_tcd += r.l_tcd;
            rec.l_bg += r.l_bg;
            rec.total += r.weighted;
            ++steps_this_epoch;
            if (cfg.max_steps && adam.step >= cfg.max_steps) {
                stop = true;
                break;
            }
        }
        const double k = static_cast<double>(steps_this_epoch);
        rec.l_gcd /= k;
        rec.l_tcd /= k;
        rec.l_bg /= k;
        rec.total /= k;
        rec.steps = adam.step;

        if (!splits.val.empty()) {
            rec.val_f = evaluate(model, splits.val, cfg.gcd_distance, cfg.threshold).change_gcd.f1;
            if (rec.val_f > best_f) {
                best_f = rec.val_f;
                save_checkpoint(result.best_checkpoint,
                                make_checkpoint(model, cfg.gcd_distance, nullptr, "", rec.epoch, best_f));
            }
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        save_checkpoint(opt.out, make_checkpoint(model, cfg.gcd_distance, &adam, detail::rng_bytes(rng),
                                                 static_cast<std::uint32_t>(rec.epoch), best_f));
        detail::csv_row(csv, rec);
        csv.flush();
        if (opt.log) {
            char line[256];
            std::snprintf(line, sizeof line,
                          "epoch %zu/%zu lr %.1e l_gcd %.4f l_tcd %.4f l_bg %.4f total %.4f val_F %s (%.1fs)\n",
                          rec.epoch, cfg.epochs, rec.lr, rec.l_gcd, rec.l_tcd, rec.l_bg, rec.total,
                          rec.val_f < 0 ? "n/a" : percent(rec.val_f).c_str(), rec.seconds);
            *opt.log << line << std::flush;
        }
        result.history.push_back(rec);
    }
    result.steps = adam.step;
    result.best_val_f = best_f;
    if (splits.val.empty()) {
        // Without validation the final weights are also the best ones.
        save_checkpoint(result.best_checkpoint, make_checkpoint(model, cfg.gcd_distance, nullptr, "",
                                                                static_cast<std::uint32_t>(start_epoch + result.history.size()), best_f));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Prediction output

inline Raster gray_raster(const std::vector<float>& v, std::size_t h, std::size_t w) {
    Raster r;
    r.width = w;
    r.height = h;
    r.channels = 1;
    r.pixels.resize(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        r.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(v[i]), 0.0, 1.0) * 255.0));
    }
    return r;
}

/// Writes change_NNNN.png, trend_NNNN.png and the background-channel maps
/// bg1_NNNN.png / bg2_NNNN.png. Returns the number of samples written.
inline std::size_t write_predictions(Model& model, const std::vector<SamplePair>& samples,
                                     const std::vector<std::size_t>& indices, DistanceKind gcd, double threshold,
                                     const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto inf = infer(model, samples, gcd, threshold, true);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto name = sample_name(indices[i]);
        const std::size_t h = samples[i].height(), w = samples[i].width();
        io::write_png(dir / ("change_" + name), change_to_raster(inf.change[i]));
        io::write_png(dir / ("trend_" + name), trend_to_rgb(inf.trend[i]));
        io::write_png(dir / ("bg1_" + name), gray_raster(inf.bg1[i], h, w));
        io::write_png(dir / ("bg2_" + name), gray_raster(inf.bg2[i], h, w));
    }
    return samples.size();
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
    DistanceKind kind;
    MetricRow change;
};

inline constexpr std::array<DistanceKind, 3> kAblationOrder = {DistanceKind::euclidean, DistanceKind::cosine,
                                                              DistanceKind::softmatch};

/// Held-out samples: the test split when a manifest exists, else everything.
inline std::vector<SamplePair> test_split(const Dataset& ds) {
    if (!ds.manifest) return ds.samples;
    const auto& t = ds.manifest->test;
    return {ds.samples.begin() + static_cast<long>(t.begin), ds.samples.begin() + static_cast<long>(t.end)};
}

/// Trains one model per GCD distance with the same seed and splits and
/// scores each best checkpoint's change map on the held-out samples.
inline std::vector<AblationRow> ablate(const RunConfig& cfg, const Dataset& train_data,
                                       const std::vector<SamplePair>& held_out, const std::filesystem::path& work_dir,
                                       std::ostream* log = nullptr) {
    std::vector<AblationRow> rows;
    for (auto kind : kAblationOrder) {
        RunConfig c = cfg;
        c.gcd_distance = kind;
        c.log_csv.clear();
        TrainOptions opt;
        opt.out = work_dir / (std::string(to_string(kind)) + ".tcdw");
        opt.log = log;
        if (log) *log << "== " << to_string(kind) << "\n";
        const auto res = train(c, train_data, opt);
        auto model = model_from(load_checkpoint(res.best_checkpoint));
        rows.push_back({kind, evaluate(model, held_out, kind, c.threshold).change_gcd});
        rows.back().change.tag = std::string(to_string(kind));
    }
    return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::vector<MetricRow> m;
    for (const auto& r : rows) m.push_back(r.change);
    return metric_table(m, "Distance");
}

inline nlohmann::ordered_json ablation_json(const std::vector<AblationRow>& rows) {
    nlohmann::ordered_json j;
    for (const auto& r : rows) j[std::string(to_string(r.kind))] = metric_json(r.change);
    return j;
}

}  // namespace trendmatch
