// trendmatch: generate synthetic data, train, predict, evaluate, ablate.
//
// Exit codes: 0 ok, 2 bad configuration or flags, 3 data / I/O error,
// 4 training diverged.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "trendmatch.hpp"

namespace fs = std::filesystem;
using namespace trendmatch;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kDiverged = 4 };

SceneSpec load_spec(const std::string& path) {
    if (path.empty()) return SceneSpec{};
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read spec " + path);
    try {
        auto spec = nlohmann::json::parse(in).get<SceneSpec>();
        spec.validate();
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// Samples and their dataset indices for a named split.
std::pair<std::vector<SamplePair>, std::vector<std::size_t>> pick_split(const Dataset& ds, const std::string& split) {
    SplitRange r{0, ds.samples.size()};
    if (split != "all") {
        if (!ds.manifest) throw DataError("dataset has no manifest; use --split all");
        const auto& m = *ds.manifest;
        r = split == "train" ? m.train : split == "val" ? m.val : m.test;
    }
    std::vector<SamplePair> s(ds.samples.begin() + static_cast<long>(r.begin), ds.samples.begin() + static_cast<long>(r.end));
    std::vector<std::size_t> idx;
    for (auto i = r.begin; i < r.end; ++i) idx.push_back(i);
    return {s, idx};
}

void check_extent(const Model& model, const std::vector<SamplePair>& s) {
    for (const auto& p : s) model.config().check_extent(p.height(), p.width());
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weakly supervised change and trend detection on bi-temporal images"};
    app.require_subcommand(1);

    std::string spec_path, out_dir;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    double val_frac = 0.1, test_frac = 0.2;
    auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
    gen->add_option("--spec", spec_path, "scene spec JSON (defaults when omitted)");
    gen->add_option("--count", count, "number of pairs")->required();
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "master seed");
    gen->add_option("--val-frac", val_frac, "validation fraction")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--test-frac", test_frac, "test fraction")->check(CLI::Range(0.0, 1.0));

    std::string config_path, data_dir, ckpt_out, resume;
    auto* tr = app.add_subcommand("train", "train on change labels");
    tr->add_option("--config", config_path, "run config JSON (defaults when omitted)");
    tr->add_option("--data", data_dir, "dataset directory")->required();
    tr->add_option("--out", ckpt_out, "final checkpoint path")->required();
    tr->add_option("--resume", resume, "checkpoint to resume from");

    std::string ckpt, split = "test", json_out;
    double threshold = 0.5;
    auto* pred = app.add_subcommand("predict", "write change, trend and background maps");
    pred->add_option("--ckpt", ckpt, "checkpoint")->required();
    pred->add_option("--data", data_dir, "dataset directory")->required();
    pred->add_option("--out", out_dir, "output directory")->required();
    pred->add_option("--split", split, "train|val|test|all")->check(CLI::IsMember({"train", "val", "test", "all"}));
    pred->add_option("--threshold", threshold, "change threshold")->check(CLI::Range(0.0, 1.0));

    auto* ev = app.add_subcommand("eval", "score a checkpoint");
    ev->add_option("--ckpt", ckpt, "checkpoint")->required();
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--split", split, "train|val|test|all")->check(CLI::IsMember({"train", "val", "test", "all"}));
    ev->add_option("--threshold", threshold, "change threshold")->check(CLI::Range(0.0, 1.0));
    ev->add_option("--json", json_out, "also write the report as JSON");

    std::string work_dir = "ablation";
    auto* ab = app.add_subcommand("ablate", "compare GCD distances");
    ab->add_option("--config", config_path, "run config JSON (defaults when omitted)");
    ab->add_option("--data", data_dir, "dataset directory")->required();
    ab->add_option("--work", work_dir, "directory for the three checkpoints");
    ab->add_option("--json", json_out, "also write the table as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*gen) {
            const auto spec = load_spec(spec_path);
            const auto manifest = make_manifest(spec, seed, count, val_frac, test_frac);
            write_dataset(generate_dataset(manifest), out_dir, manifest);
            std::cout << "wrote " << count << " pairs to " << out_dir << "\n";
        } else if (*tr) {
            const RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
            cfg.validate();
            const auto ds = read_training_set(data_dir);
            TrainOptions opt;
            opt.out = ckpt_out;
            opt.log = &std::cout;
            if (!resume.empty()) opt.resume = resume;
            const auto res = train(cfg, ds, opt);
            std::cout << "final checkpoint " << res.final_checkpoint.string() << "\nbest checkpoint "
                      << res.best_checkpoint.string() << "\n";
        } else if (*pred) {
            const auto ck = load_checkpoint(ckpt);
            auto model = model_from(ck);
            const auto ds = read_dataset(data_dir, LabelAccess::change_only);
            const auto [samples, idx] = pick_split(ds, ds.manifest ? split : "all");
            check_extent(model, samples);
            const auto n = write_predictions(model, samples, idx, ck.gcd_distance, threshold, out_dir);
            std::cout << "wrote predictions for " << n << " pairs to " << out_dir << "\n";
        } else if (*ev) {
            const auto ck = load_checkpoint(ckpt);
            auto model = model_from(ck);
            const auto ds = read_dataset(data_dir, LabelAccess::with_trend);
            const auto [samples, idx] = pick_split(ds, ds.manifest ? split : "all");
            check_extent(model, samples);
            if (!ds.has_trend) std::cerr << "warning: no trend labels in " << data_dir << "; reporting change row only\n";
            const auto report = evaluate(model, samples, ck.gcd_distance, threshold);
            std::cout << eval_text(report);
            write_json(json_out, eval_json(report));
        } else if (*ab) {
            const RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
            cfg.validate();
            const auto ds = read_training_set(data_dir);
            const auto rows = ablate(cfg, ds, test_split(ds), work_dir, &std::cout);
            std::cout << ablation_table(rows);
            write_json(json_out, ablation_json(rows));
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDiverged;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const GenerationError& e) {
        std::cerr << "generation error: " << e.what() << "\n";
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kOk;
}
