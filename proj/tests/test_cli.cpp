#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "diffattn/image.hpp"

using namespace diffattn;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code;
    std::string output;  // stdout + stderr interleaved
};

std::string cli_path() {
#ifdef DIFFATTN_CLI_PATH
    return DIFFATTN_CLI_PATH;
#else
    const char* p = std::getenv("DIFFATTN_CLI_PATH");
    if (!p) throw std::runtime_error("DIFFATTN_CLI_PATH is not set");
    return p;
#endif
}

RunResult run(const std::string& args) {
    const std::string cmd = cli_path() + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed for: " + cmd);
    std::string out;
    std::array<char, 512> buf;
    while (std::fgets(buf.data(), buf.size(), pipe)) out += buf.data();
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Image flat(float r, float g, float b, std::size_t side = 16) {
    Image im(side, side);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            im.at(0, y, x) = r;
            im.at(1, y, x) = g;
            im.at(2, y, x) = b;
        }
    return im;
}

// One workspace per suite: two flat images, a training set, a VQA set, a
// needle manifest, and a toy config that memorizes the color task.
class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "diffattn_cli_ws";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        img::save_f32(dir_ / "red.f32", flat(0.9f, 0.1f, 0.1f));
        img::save_f32(dir_ / "blue.f32", flat(0.1f, 0.1f, 0.9f));
        for (int i = 0; i < 4; ++i)
            img::save_f32(dir_ / ("cand" + std::to_string(i) + ".f32"),
                          flat(0.2f * static_cast<float>(i + 1), 0.5f, 0.5f, 224));

        std::ofstream(dir_ / "train.jsonl")
            << R"({"image":")" << (dir_ / "red.f32").string()
            << R"(","question":"what color","answer":"red"})" << "\n"
            << R"({"image":")" << (dir_ / "blue.f32").string()
            << R"(","question":"what color","answer":"blue"})" << "\n";

        auto refs = [](const std::string& w) {
            std::string out = "[";
            for (int i = 0; i < 10; ++i) out += (i ? ",\"" : "\"") + w + "\"";
            return out + "]";
        };
        std::ofstream(dir_ / "vqa.jsonl")
            << R"({"image":")" << (dir_ / "red.f32").string()
            << R"(","question":"what color","answers":)" << refs("red") << "}\n"
            << R"({"image":")" << (dir_ / "blue.f32").string()
            << R"(","question":"what color","answers":)" << refs("blue") << "}\n";

        std::ofstream needle(dir_ / "needle.jsonl");
        for (int i = 0; i < 4; ++i)
            needle << R"({"image":")" << (dir_ / ("cand" + std::to_string(i) + ".f32")).string()
                   << R"(","caption":"caption )" << i << "\"}\n";

        std::ofstream(dir_ / "toy.cfg") << "# toy color task\n"
                                           "model.d_model = 16\n"
                                           "model.d_head = 8\n"
                                           "model.n_layers_enc = 1\n"
                                           "model.n_layers_dec = 2\n"
                                           "model.max_seq_len = 16\n"
                                           "train.batch_size = 1\n"
                                           "train.lr_rule = explicit\n"
                                           "train.lr = 0.02\n"
                                           "train.train_layer_norms = true\n"
                                           "train.epochs = 120\n"
                                           "train.max_steps = 120\n"
                                           "data.train = "
                                        << (dir_ / "train.jsonl").string() << "\n";
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static std::string cfg() { return (dir_ / "toy.cfg").string(); }
    static fs::path dir_;
};
fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, TrainWritesCheckpointMetricsAndManifest) {
    const fs::path out = dir_ / "run_basic";
    auto r = run("train --config " + cfg() + " --seed 7 --out-dir " + out.string());
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_TRUE(fs::exists(out / "model.ckpt"));
    EXPECT_TRUE(fs::exists(out / "metrics.jsonl"));
    EXPECT_TRUE(fs::exists(out / "manifest.json"));

    // metrics are JSON lines with the expected fields
    std::ifstream metrics(out / "metrics.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(metrics, line)) {
        ++lines;
        auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("step") && j.contains("loss") && j.contains("lambda_mean"));
    }
    EXPECT_EQ(lines, 120u);
}

TEST_F(Cli, MissingDatasetExitsTwoAndNamesPath) {
    auto r = run("train --config " + cfg() + " --set data.train=/nope/missing.jsonl --out-dir " +
                 (dir_ / "run_missing").string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("/nope/missing.jsonl"), std::string::npos) << r.output;
}

TEST_F(Cli, UnknownConfigKeyExitsTwoAndNamesKey) {
    auto r = run("train --config " + cfg() + " --set bogus.key=1 --out-dir " +
                 (dir_ / "run_bogus").string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("bogus.key"), std::string::npos) << r.output;
}

TEST_F(Cli, SetOverrideRoundTripsIntoManifestSnapshot) {
    const fs::path out = dir_ / "run_lr0";
    auto r = run("train --config " + cfg() + " --set train.lr=0 --seed 1 --out-dir " +
                 out.string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
    const std::string snapshot = manifest.at("config_snapshot").get<std::string>();
    EXPECT_NE(snapshot.find("train.lr = 0"), std::string::npos) << snapshot;
    EXPECT_FALSE(manifest.at("inputs").empty());
}

TEST_F(Cli, TrainIsByteDeterministic) {
    const fs::path a = dir_ / "run_det_a", b = dir_ / "run_det_b";
    ASSERT_EQ(run("train --config " + cfg() + " --seed 5 --out-dir " + a.string()).exit_code, 0);
    ASSERT_EQ(run("train --config " + cfg() + " --seed 5 --out-dir " + b.string()).exit_code, 0);
    EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
    EXPECT_EQ(slurp(a / "model.ckpt"), slurp(b / "model.ckpt"));
}

TEST_F(Cli, InspectSummarizesCheckpoint) {
    const fs::path out = dir_ / "run_inspect";
    ASSERT_EQ(run("train --config " + cfg() + " --seed 2 --out-dir " + out.string()).exit_code, 0);
    auto r = run("inspect --model " + (out / "model.ckpt").string());
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("lambda_init"), std::string::npos);
    EXPECT_NE(r.output.find("trainable parameters"), std::string::npos);
    EXPECT_NE(r.output.find("lora.a"), std::string::npos);
}

TEST_F(Cli, CorruptCheckpointExitsFour) {
    const fs::path out = dir_ / "run_corrupt";
    ASSERT_EQ(run("train --config " + cfg() + " --seed 3 --out-dir " + out.string()).exit_code, 0);
    const std::string full = slurp(out / "model.ckpt");
    std::ofstream(out / "broken.ckpt", std::ios::binary) << full.substr(0, 60);
    EXPECT_EQ(run("inspect --model " + (out / "broken.ckpt").string()).exit_code, 4);
    EXPECT_EQ(run("eval-vqa --model " + (out / "broken.ckpt").string() + " --data " +
                  (dir_ / "vqa.jsonl").string() + " --out " + (out / "v.jsonl").string())
                  .exit_code,
              4);
}

TEST_F(Cli, EvalVqaPrintsAggregateWithTwoDecimals) {
    const fs::path out = dir_ / "run_vqa";
    ASSERT_EQ(run("train --config " + cfg() + " --seed 7 --out-dir " + out.string()).exit_code, 0);
    auto r = run("eval-vqa --model " + (out / "model.ckpt").string() + " --data " +
                 (dir_ / "vqa.jsonl").string() + " --out " + (out / "records.jsonl").string());
    EXPECT_EQ(r.exit_code, 0) << r.output;
    // the memorized toy task solves its own training questions
    EXPECT_NE(r.output.find("100.00"), std::string::npos) << r.output;
    std::ifstream recs(out / "records.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(recs, line)) {
        ++lines;
        EXPECT_DOUBLE_EQ(nlohmann::json::parse(line).at("score").get<double>(), 1.0);
    }
    EXPECT_EQ(lines, 2u);
}

TEST_F(Cli, EvalNeedleOracleWritesReports) {
    const fs::path out = dir_ / "needle_oracle";
    auto r = run("eval-needle --manifest " + (dir_ / "needle.jsonl").string() +
                 " --responder oracle --samples 40 --seed 4 --out-dir " + out.string());
    EXPECT_EQ(r.exit_code, 0) << r.output;
    auto summary = nlohmann::json::parse(slurp(out / "summary.json"));
    EXPECT_DOUBLE_EQ(summary.at("index_accuracy").get<double>(), 1.0);
    EXPECT_EQ(summary.at("trials").get<std::size_t>(), 40u);
    EXPECT_TRUE(fs::exists(out / "cells.csv"));
    EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST_F(Cli, EvalNeedleRejectsBadResponder) {
    auto r = run("eval-needle --manifest " + (dir_ / "needle.jsonl").string() +
                 " --responder psychic --out-dir " + (dir_ / "needle_bad").string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("psychic"), std::string::npos);
}

TEST_F(Cli, GradcheckPassesAndListsLambdaGroup) {
    auto r = run("gradcheck --seed 1");
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("lambda"), std::string::npos);
    EXPECT_NE(r.output.find("lora.a"), std::string::npos);
    EXPECT_NE(r.output.find("ffn.swiglu"), std::string::npos);
    EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
}

TEST_F(Cli, NoSubcommandExitsTwoHelpExitsZero) {
    EXPECT_EQ(run("").exit_code, 2);
    EXPECT_EQ(run("--help").exit_code, 0);
}
