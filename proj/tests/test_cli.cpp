// Drives the installed command-line tool as a subprocess.

#include <gtest/gtest.h>
#include <json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

using nlohmann::json;

namespace {

const std::filesystem::path kRoot = std::filesystem::temp_directory_path() / "physnet_test_cli";

struct CliRun {
    int code = -1;
    std::string out;
};

CliRun physnet(const std::string& args) {
    const std::string cmd = std::string(PHYSNET_CLI) + " " + args + " 2>&1";
    CliRun r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string write_json(const std::string& name, const json& j) {
    const auto p = kRoot / name;
    std::ofstream(p) << j.dump(2);
    return p.string();
}

std::string manifest_line(const std::string& out) {
    std::istringstream in(out);
    for (std::string line; std::getline(in, line);) {
        if (line.rfind("manifest sha256 ", 0) == 0) return line.substr(16);
    }
    return {};
}

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        std::filesystem::remove_all(kRoot);
        std::filesystem::create_directories(kRoot);
        gen_config_ = write_json("gen.json", {{"generator",
                                               {{"sim_size", 32},
                                                {"t_min", 20.0},
                                                {"t_max", 40.0},
                                                {"tap_size", 4},
                                                {"image_size", 16}}}});
        train_config_ = write_json(
            "train.json",
            {{"epochs", 2},
             {"batch_size", 8},
             {"finetune_steps", 5},
             {"backbone",
              {{"input_size", 16},
               {"stages", {{{"channels", 4}, {"stride", 2}}, {{"channels", 4}, {"stride", 2}}, {{"channels", 4}, {"stride", 2}}}},
               {"tap_stage", 2},
               {"head_hidden", 3}}}});
    }
    static void TearDownTestSuite() { std::filesystem::remove_all(kRoot); }

    static inline std::string gen_config_, train_config_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(physnet("").code, 1);
    EXPECT_EQ(physnet("frobnicate").code, 1);
    EXPECT_EQ(physnet("train --data x").code, 1);
    const CliRun zero = physnet("gen --n 0 --out " + (kRoot / "zero").string());
    EXPECT_EQ(zero.code, 1) << zero.out;
    EXPECT_NE(zero.out.find("n_per_class"), std::string::npos) << zero.out;
    EXPECT_FALSE(std::filesystem::exists(kRoot / "zero" / "manifest.json"));
    EXPECT_EQ(physnet("check --inject-fault gremlins --report-dir " + (kRoot / "ck_bad").string()).code, 1);
}

TEST_F(Cli, GenIsReproducible) {
    const CliRun a = physnet("gen --config " + gen_config_ + " --n 3 --seed 11 --out " + (kRoot / "g1").string());
    const CliRun b = physnet("gen --config " + gen_config_ + " --n 3 --seed 11 --out " + (kRoot / "g2").string());
    ASSERT_EQ(a.code, 0) << a.out;
    ASSERT_EQ(b.code, 0) << b.out;
    EXPECT_EQ(manifest_line(a.out).size(), 64u);
    EXPECT_EQ(manifest_line(a.out), manifest_line(b.out));
}

TEST_F(Cli, CheckPassesAndDetectsFaults) {
    const CliRun ok = physnet("check --report-dir " + (kRoot / "ck").string());
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_TRUE(std::filesystem::exists(kRoot / "ck" / "check.json"));
    const auto report = json::parse(std::ifstream(kRoot / "ck" / "check.json"));
    EXPECT_TRUE(report.at("passed").get<bool>());

    const CliRun fault = physnet("check --inject-fault laplacian_sign --report-dir " + (kRoot / "ck_fault").string());
    EXPECT_EQ(fault.code, 3) << fault.out;
    EXPECT_NE(fault.out.find("FAIL"), std::string::npos);

    const CliRun strict = physnet("check --grad-tol 1e-8 --report-dir " + (kRoot / "ck_strict").string());
    EXPECT_EQ(strict.code, 3) << strict.out;
    const auto sr = json::parse(std::ifstream(kRoot / "ck_strict" / "check.json"));
    bool conv_failed = false;
    for (const auto& c : sr.at("checks")) {
        if (c.at("name").get<std::string>().rfind("grad_conv", 0) == 0 && !c.at("passed").get<bool>()) conv_failed = true;
    }
    EXPECT_TRUE(conv_failed);
}

TEST_F(Cli, TrainEvalAndDisabledLosses) {
    const auto data = (kRoot / "d").string();
    ASSERT_EQ(physnet("gen --config " + gen_config_ + " --n 10 --seed 2 --out " + data).code, 0);

    const CliRun tr = physnet("train --data " + data + " --out " + (kRoot / "m").string() + " --config " + train_config_);
    ASSERT_EQ(tr.code, 0) << tr.out;
    EXPECT_TRUE(std::filesystem::exists(kRoot / "m" / "model.params"));
    const CliRun ev = physnet("eval --data " + data + " --model " + (kRoot / "m").string() + " --report-dir " +
                           (kRoot / "rep").string() + " --finetune-steps 5");
    EXPECT_EQ(ev.code, 0) << ev.out;
    EXPECT_TRUE(std::filesystem::exists(kRoot / "rep" / "metrics.json"));

    const CliRun off = physnet("train --data " + data + " --out " + (kRoot / "m_off").string() + " --config " +
                            train_config_ + " --disable-physics --disable-boundary --disable-temporal");
    ASSERT_EQ(off.code, 0) << off.out;
    std::ifstream log(kRoot / "m_off" / "train_log.jsonl");
    int lines = 0;
    for (std::string line; std::getline(log, line); ++lines) {
        const auto j = json::parse(line);
        EXPECT_EQ(j.at("lambda_p"), 0.0);
        EXPECT_EQ(j.at("lambda_b"), 0.0);
        EXPECT_EQ(j.at("lambda_t"), 0.0);
    }
    EXPECT_EQ(lines, 2);

    const CliRun missing = physnet("eval --data " + data + " --model " + (kRoot / "no_model").string() + " --report-dir " +
                                (kRoot / "rep2").string());
    EXPECT_EQ(missing.code, 2) << missing.out;
    const CliRun bad_override = physnet("train --data " + data + " --out " + (kRoot / "m_bad").string() +
                                     " --override '{\"epochz\": 1}'");
    EXPECT_EQ(bad_override.code, 1) << bad_override.out;
}
