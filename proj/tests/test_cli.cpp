#include <gtest/gtest.h>

#include <sys/wait.h>

#include "support.hpp"

using namespace trendmatch;
namespace fs = std::filesystem;

namespace {

const fs::path& work() {
    static const fs::path dir = [] {
        auto p = fs::temp_directory_path() / "trendmatch_cli_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

// Runs the CLI with `args`, output discarded into a log file; returns the exit code.
int run(const std::string& args) {
    const auto log = work() / "last.log";
    const std::string cmd = std::string(TRENDMATCH_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_text(e.path());
    }
    return out;
}

std::size_t count_files(const fs::path& dir) {
    return static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}));
}

// 24x24 scenes and a two-level net keep each command well under a second.
fs::path small_files() {
    const auto spec = work() / "spec.json";
    const auto cfg = work() / "config.json";
    if (!fs::exists(spec)) {
        write_text(spec, R"({"height": 24, "width": 24, "min_shapes": 1, "max_shapes": 2, "min_size": 4, "max_size": 8})");
        write_text(cfg, R"({"net": {"depth": 2, "base_channels": 4}, "epochs": 2, "batch_size": 4, "augment": {"crop": 12}})");
    }
    return work();
}

}  // namespace

TEST(Cli, GenerateWritesQuadruplesAndManifest) {
    const auto dir = work() / "gen10";
    ASSERT_EQ(run("generate --count 10 --seed 3 --out " + dir.string()), 0);
    for (const char* sub : {"t1", "t2", "change", "trend"}) EXPECT_EQ(count_files(dir / sub), 10u) << sub;
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_EQ(count_files(dir), 5u);

    const auto again = work() / "gen10b";
    ASSERT_EQ(run("generate --count 10 --seed 3 --out " + again.string()), 0);
    EXPECT_EQ(tree(dir), tree(again));
}

TEST(Cli, GenerateZeroCount) {
    const auto dir = work() / "gen0";
    ASSERT_EQ(run("generate --count 0 --out " + dir.string()), 0);
    const auto m = parse_manifest(nlohmann::json::parse(read_text(dir / "manifest.json")));
    EXPECT_EQ(m.count, 0u);
    EXPECT_TRUE(read_dataset(dir).samples.empty());
}

TEST(Cli, ConfigErrorsExitTwoBeforeWriting) {
    const auto base = small_files();
    write_text(base / "bad_spec.json", R"({"heigth": 16})");
    EXPECT_EQ(run("generate --count 2 --spec " + (base / "bad_spec.json").string() + " --out " + (base / "never").string()), 2);
    EXPECT_FALSE(fs::exists(base / "never"));
    EXPECT_EQ(run("generate --count -1 --out " + (base / "never").string()), 2);
    EXPECT_EQ(run("frobnicate"), 2);

    ASSERT_EQ(run("generate --count 4 --spec " + (base / "spec.json").string() + " --out " + (base / "d4").string()), 0);
    write_text(base / "bad_cfg.json", R"({"optimizer": {"lr": 0}})");
    EXPECT_EQ(run("train --config " + (base / "bad_cfg.json").string() + " --data " + (base / "d4").string() + " --out " +
                  (base / "never.tcdw").string()),
              2);
    EXPECT_FALSE(fs::exists(base / "never.tcdw"));
    EXPECT_FALSE(fs::exists(base / "never.csv"));
}

TEST(Cli, DataErrorsExitThree) {
    const auto base = small_files();
    EXPECT_EQ(run("train --data " + (base / "missing").string() + " --out " + (base / "x.tcdw").string()), 3);
    write_text(base / "junk.tcdw", "not a checkpoint");
    ASSERT_EQ(run("generate --count 2 --spec " + (base / "spec.json").string() + " --out " + (base / "d2").string()), 0);
    EXPECT_EQ(run("eval --ckpt " + (base / "junk.tcdw").string() + " --data " + (base / "d2").string()), 3);
}

TEST(Cli, DivergenceExitsFour) {
    const auto base = small_files();
    ASSERT_EQ(run("generate --count 4 --spec " + (base / "spec.json").string() + " --out " + (base / "div").string()), 0);
    write_text(base / "huge_lr.json",
               R"({"net": {"depth": 2, "base_channels": 4}, "epochs": 20, "optimizer": {"lr": 1e38}, "augment": {"crop": 12}})");
    EXPECT_EQ(run("train --config " + (base / "huge_lr.json").string() + " --data " + (base / "div").string() + " --out " +
                  (base / "div.tcdw").string()),
              4);
}

TEST(Cli, TrainPredictEvalWithoutTrendLabels) {
    const auto base = small_files();
    const auto data = base / "pipe";
    ASSERT_EQ(run("generate --count 10 --seed 9 --spec " + (base / "spec.json").string() + " --out " + data.string()), 0);
    const auto trend_dir = base / "pipe_trend";
    fs::rename(data / "trend", trend_dir);

    const auto ckpt = base / "pipe.tcdw";
    ASSERT_EQ(run("train --config " + (base / "config.json").string() + " --data " + data.string() + " --out " + ckpt.string()),
              0)
        << read_text(work() / "last.log");
    EXPECT_TRUE(fs::exists(ckpt));
    EXPECT_TRUE(fs::exists(best_checkpoint_path(ckpt)));
    EXPECT_TRUE(fs::exists(base / "pipe.csv"));
    EXPECT_NE(read_text(work() / "last.log").find("epoch 2/2"), std::string::npos);

    // two test-split samples with the default fractions
    const auto out1 = base / "pred1", out2 = base / "pred2";
    ASSERT_EQ(run("predict --ckpt " + ckpt.string() + " --data " + data.string() + " --out " + out1.string()), 0);
    ASSERT_EQ(run("predict --ckpt " + ckpt.string() + " --data " + data.string() + " --out " + out2.string()), 0);
    EXPECT_EQ(count_files(out1), 4u * 2u);
    EXPECT_EQ(tree(out1), tree(out2));
    const auto trend_png = io::read_png(out1 / "trend_0008.png");
    EXPECT_EQ(trend_png.channels, 3u);
    ASSERT_EQ(run("predict --split all --ckpt " + ckpt.string() + " --data " + data.string() + " --out " +
                  (base / "pred_all").string()),
              0);
    EXPECT_EQ(count_files(base / "pred_all"), 4u * 10u);

    EXPECT_EQ(run("eval --ckpt " + ckpt.string() + " --data " + data.string()), 0);
    EXPECT_NE(read_text(work() / "last.log").find("warning: no trend labels"), std::string::npos);

    fs::rename(trend_dir, data / "trend");
    const auto report = base / "report.json";
    ASSERT_EQ(run("eval --ckpt " + ckpt.string() + " --data " + data.string() + " --json " + report.string()), 0);
    const auto j = nlohmann::ordered_json::parse(read_text(report));
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    EXPECT_EQ(keys, (std::vector<std::string>{"C", "A", "D", "T", "change_gcd"}));
}

TEST(Cli, AblateEmitsThreeRows) {
    const auto base = small_files();
    const auto data = base / "abl";
    ASSERT_EQ(run("generate --count 8 --seed 2 --spec " + (base / "spec.json").string() + " --out " + data.string()), 0);
    write_text(base / "abl.json", R"({"net": {"depth": 2, "base_channels": 4}, "epochs": 1, "augment": {"crop": 12}})");
    auto once = [&](const std::string& tag) {
        const auto js = base / (tag + ".json");
        EXPECT_EQ(run("ablate --config " + (base / "abl.json").string() + " --data " + data.string() + " --work " +
                      (base / (tag + "_work")).string() + " --json " + js.string()),
                  0);
        return read_text(js);
    };
    const auto a = once("ab1"), b = once("ab2");
    EXPECT_EQ(a, b);
    const auto j = nlohmann::ordered_json::parse(a);
    ASSERT_EQ(j.size(), 3u);
    for (const char* k : {"euclidean", "cosine", "softmatch"}) {
        ASSERT_TRUE(j.contains(k)) << k;
        EXPECT_EQ(j[k].size(), 5u);
    }
}

TEST(Cli, Cleanup) { fs::remove_all(work()); }
