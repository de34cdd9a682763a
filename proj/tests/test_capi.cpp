#include "physnet/physnet.h"

#include <gtest/gtest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using nlohmann::json;

namespace {

const std::filesystem::path kRoot = std::filesystem::temp_directory_path() / "physnet_test_capi";

json small_generator() {
    return {{"sim_size", 32}, {"t_min", 20.0}, {"t_max", 40.0}, {"tap_size", 4}, {"image_size", 16}};
}

json tiny_config() {
    return {{"epochs", 1},
            {"batch_size", 8},
            {"eval_batch_size", 16},
            {"finetune_steps", 5},
            {"backbone",
             {{"input_size", 16},
              {"in_channels", 1},
              {"stages", {{{"channels", 4}, {"stride", 2}}, {{"channels", 4}, {"stride", 2}}, {{"channels", 4}, {"stride", 2}}}},
              {"tap_stage", 2},
              {"head_hidden", 3}}}};
}

physnet_status run(physnet_status (*fn)(const char*, char**), const json& options, json* result = nullptr) {
    char* out = nullptr;
    const physnet_status s = fn(options.dump().c_str(), &out);
    if (out) {
        if (result) *result = json::parse(out);
        physnet_string_free(out);
    }
    return s;
}

class CApi : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        std::filesystem::remove_all(kRoot);
        json r;
        ASSERT_EQ(run(physnet_generate,
                      {{"out", (kRoot / "data").string()}, {"n_per_class", 10}, {"seed", 4}, {"generator", small_generator()}},
                      &r),
                  PHYSNET_OK)
            << physnet_last_error();
        ASSERT_EQ(run(physnet_train,
                      {{"data", (kRoot / "data").string()}, {"out", (kRoot / "model").string()}, {"config", tiny_config()}}),
                  PHYSNET_OK)
            << physnet_last_error();
    }
    static void TearDownTestSuite() { std::filesystem::remove_all(kRoot); }
};

}  // namespace

TEST(CApiBasics, VersionAndUsageErrors) {
    EXPECT_NE(std::string(physnet_version()), "");
    char* out = nullptr;
    EXPECT_EQ(physnet_generate("{not json", &out), PHYSNET_ERR_USAGE);
    EXPECT_EQ(out, nullptr);
    EXPECT_NE(std::string(physnet_last_error()), "");
    EXPECT_EQ(run(physnet_generate, {{"out", (kRoot / "never").string()}, {"n_per_class", 0}}), PHYSNET_ERR_USAGE);
    EXPECT_FALSE(std::filesystem::exists(kRoot / "never" / "manifest.json"));
    EXPECT_EQ(run(physnet_generate, {{"out", (kRoot / "never").string()}, {"n_per_class", 2}, {"colour", 1}}),
              PHYSNET_ERR_USAGE);
    EXPECT_EQ(run(physnet_evaluate, {{"data", (kRoot / "nowhere").string()}, {"model", (kRoot / "nothing").string()},
                                     {"report", (kRoot / "r").string()}}),
              PHYSNET_ERR_RUNTIME);
    physnet_model* m = nullptr;
    EXPECT_NE(physnet_model_load((kRoot / "nothing").c_str(), &m), PHYSNET_OK);
    EXPECT_EQ(m, nullptr);
}

TEST(CApiBasics, ResolveConfig) {
    char* out = nullptr;
    ASSERT_EQ(physnet_resolve_config(nullptr, "{\"epochs\": 3}", &out), PHYSNET_OK);
    const json r = json::parse(out);
    physnet_string_free(out);
    EXPECT_EQ(r.at("config").at("epochs"), 3);
    EXPECT_EQ(r.at("config_hash").get<std::string>().size(), 16u);
    EXPECT_EQ(physnet_resolve_config(nullptr, "{\"epochz\": 3}", &out), PHYSNET_ERR_USAGE);
    EXPECT_EQ(physnet_resolve_config("/nonexistent/config.json", nullptr, &out), PHYSNET_ERR_RUNTIME);
}

TEST_F(CApi, DatasetHandle) {
    physnet_dataset* ds = nullptr;
    ASSERT_EQ(physnet_dataset_open((kRoot / "data").c_str(), 1, &ds), PHYSNET_OK) << physnet_last_error();
    std::size_t n = 0, classes = 0, size = 0;
    ASSERT_EQ(physnet_dataset_info(ds, &n, &classes, &size), PHYSNET_OK);
    EXPECT_EQ(n, 40u);
    EXPECT_EQ(classes, 4u);
    EXPECT_EQ(size, 16u);
    EXPECT_EQ(std::string(physnet_dataset_checksum(ds)).size(), 64u);
    physnet_dataset_free(ds);
    physnet_dataset_free(nullptr);
}

TEST_F(CApi, ModelHandlePredictsAndEvaluates) {
    physnet_model* m = nullptr;
    ASSERT_EQ(physnet_model_load((kRoot / "model").c_str(), &m), PHYSNET_OK) << physnet_last_error();
    std::size_t image = 0, tap = 0, classes = 0;
    ASSERT_EQ(physnet_model_shape(m, &image, &tap, &classes), PHYSNET_OK);
    EXPECT_EQ(image, 16u);
    EXPECT_EQ(tap, 4u);
    EXPECT_EQ(classes, 4u);
    double D = 0, rho = 0, K = 0;
    ASSERT_EQ(physnet_model_physical(m, &D, &rho, &K), PHYSNET_OK);
    EXPECT_GT(D, 0.0);
    EXPECT_GT(rho, 0.0);
    EXPECT_GT(K, 0.0);

    std::vector<double> pixels(2 * 16 * 16, 0.3);
    int labels[2] = {-1, -1};
    std::vector<double> u(2 * 16);
    ASSERT_EQ(physnet_model_predict(m, pixels.data(), 2, labels, u.data()), PHYSNET_OK);
    EXPECT_EQ(labels[0], labels[1]);
    EXPECT_GE(labels[0], 0);
    EXPECT_LT(labels[0], 4);
    for (double v : u) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, K);
    }
    EXPECT_EQ(physnet_model_predict(m, nullptr, 2, labels, nullptr), PHYSNET_ERR_USAGE);

    physnet_dataset* ds = nullptr;
    ASSERT_EQ(physnet_dataset_open((kRoot / "data").c_str(), 0, &ds), PHYSNET_OK);
    char* out = nullptr;
    ASSERT_EQ(physnet_model_evaluate(m, ds, "val", &out), PHYSNET_OK) << physnet_last_error();
    const json metrics = json::parse(out);
    physnet_string_free(out);
    EXPECT_EQ(metrics.at("n"), 4);
    EXPECT_EQ(physnet_model_evaluate(m, ds, "holdout", &out), PHYSNET_ERR_USAGE);
    physnet_dataset_free(ds);
    physnet_model_free(m);
}

TEST_F(CApi, CorruptCheckpointRejected) {
    std::filesystem::copy(kRoot / "model", kRoot / "model_bad", std::filesystem::copy_options::recursive);
    {
        std::ofstream f(kRoot / "model_bad" / "model.params", std::ios::binary | std::ios::app);
        f << "x";
    }
    physnet_model* m = nullptr;
    EXPECT_EQ(physnet_model_load((kRoot / "model_bad").c_str(), &m), PHYSNET_ERR_RUNTIME);
    EXPECT_NE(std::string(physnet_last_error()).find("model.params"), std::string::npos) << physnet_last_error();
}

TEST_F(CApi, EvaluateWritesReportFiles) {
    json r;
    const auto report = kRoot / "report";
    ASSERT_EQ(run(physnet_evaluate,
                  {{"data", (kRoot / "data").string()}, {"model", (kRoot / "model").string()}, {"report", report.string()},
                   {"finetune_steps", 5}},
                  &r),
              PHYSNET_OK)
        << physnet_last_error();
    for (const char* f : {"metrics.json", "summary.txt", "confusion.csv", "physical_params.csv", "loss_curves.csv",
                          "resolved_config.json"}) {
        EXPECT_TRUE(std::filesystem::exists(report / f)) << f;
    }
    EXPECT_TRUE(r.contains("accuracy"));
    EXPECT_EQ(r.at("split"), "test");
}
