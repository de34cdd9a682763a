// physnet command-line tool: gen, train, eval, ablate, check.

#include "physnet/physnet.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

using nlohmann::json;

namespace {

constexpr const char* kReportEnv = "PHYSNET_REPORT_DIR";

std::string report_dir(const std::string& flag, const char* subcommand) {
    if (!flag.empty()) return flag;
    if (const char* root = std::getenv(kReportEnv); root && *root) return std::string(root) + "/" + subcommand;
    return std::string("reports/") + subcommand;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return json::parse(ss.str());
}

int fail(physnet_status s) {
    std::cerr << "error: " << physnet_last_error() << "\n";
    return static_cast<int>(s);
}

/// Calls one run-level entry point and returns the parsed result.
template <class Fn>
physnet_status call(Fn fn, const json& options, json& result) {
    char* out = nullptr;
    const physnet_status s = fn(options.dump().c_str(), &out);
    if (out) {
        result = json::parse(out);
        physnet_string_free(out);
    }
    return s;
}

struct TrainFlags {
    std::string config;
    std::string overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> lr;
    std::optional<std::string> lambda_mode;
    std::optional<double> fixed_lambda;
    bool disable_physics = false;
    bool disable_boundary = false;
    bool disable_temporal = false;
    bool physics_free = false;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "JSON training config");
        app->add_option("--override", overrides, "JSON object merged over the config");
        app->add_option("--seed", seed, "training seed");
        app->add_option("--epochs", epochs);
        app->add_option("--batch-size", batch_size);
        app->add_option("--lr", lr, "initial learning rate");
        app->add_option("--lambda-mode", lambda_mode, "adaptive, literal or fixed");
        app->add_option("--fixed-lambda", fixed_lambda, "use a constant physics weight");
        app->add_flag("--disable-physics", disable_physics);
        app->add_flag("--disable-boundary", disable_boundary);
        app->add_flag("--disable-temporal", disable_temporal);
        app->add_flag("--physics-free", physics_free, "classifier only, no field heads");
    }

    /// Options shared by train and ablate: config file plus flag overrides.
    void apply(json& options) const {
        if (!config.empty()) options["config_file"] = config;
        json o = overrides.empty() ? json::object() : json::parse(overrides);
        if (seed) o["seed"] = *seed;
        if (epochs) o["epochs"] = *epochs;
        if (batch_size) o["batch_size"] = *batch_size;
        if (lr) o["learning_rate"] = *lr;
        if (lambda_mode) o["scheduler"]["mode"] = *lambda_mode;
        if (fixed_lambda) {
            o["scheduler"]["mode"] = "fixed";
            o["scheduler"]["fixed_lambda"] = *fixed_lambda;
        }
        if (disable_physics) o["disable_physics"] = true;
        if (disable_boundary) o["disable_boundary"] = true;
        if (disable_temporal) o["disable_temporal"] = true;
        if (physics_free) o["physics_free"] = true;
        if (!o.empty()) options["config"] = o;
    }
};

int cmd_gen(const std::string& config, const std::string& out, std::optional<long long> n,
            std::optional<std::uint64_t> seed) {
    json options = config.empty() ? json::object() : read_json_file(config);
    if (!out.empty()) options["out"] = out;
    if (n) options["n_per_class"] = *n;
    if (seed) options["seed"] = *seed;
    json r;
    const auto s = call(physnet_generate, options, r);
    if (s != PHYSNET_OK) return fail(s);
    for (const auto& [name, count] : r.at("class_counts").items()) std::cout << name << " " << count << "\n";
    std::cout << "manifest sha256 " << r.at("manifest_sha256").get<std::string>() << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& out, const TrainFlags& flags) {
    json options{{"data", data}, {"out", out}};
    flags.apply(options);
    json r;
    const auto s = call(physnet_train, options, r);
    if (s != PHYSNET_OK) return fail(s);
    const auto& f = r.at("final");
    std::cout << "epochs " << r.at("epochs") << ", config " << r.at("config_hash").get<std::string>() << ", seed "
              << r.at("seed") << "\n";
    std::cout << "final: l_cls " << f.at("l_cls") << ", l_physics " << f.at("l_physics") << ", val accuracy "
              << f.at("val_accuracy") << ", lambda_p " << f.at("lambda_p_end") << "\n";
    std::cout << "D " << r.at("D") << ", rho " << r.at("rho") << ", K " << r.at("K") << "\n";
    return 0;
}

int cmd_eval(const json& options) {
    json r;
    const auto s = call(physnet_evaluate, options, r);
    if (s != PHYSNET_OK) return fail(s);
    std::ifstream summary(options.at("report").get<std::string>() + "/summary.txt");
    std::cout << summary.rdbuf();
    return 0;
}

int cmd_ablate(json options) {
    json r;
    const auto s = call(physnet_ablate, options, r);
    if (s != PHYSNET_OK) return fail(s);
    std::printf("%-14s %6s %10s %10s %12s %10s  %s\n", "variant", "seed", "accuracy", "macro_f1", "mean|R|",
                "lambda_p", "status");
    for (const auto& row : r.at("rows")) {
        if (row.at("status") == "ok") {
            std::printf("%-14s %6llu %10.4f %10.4f %12.6g %10.6g  ok\n", row.at("variant").get<std::string>().c_str(),
                        static_cast<unsigned long long>(row.at("seed").get<std::uint64_t>()),
                        row.at("accuracy").get<double>(), row.at("macro_f1").get<double>(),
                        row.at("residual_mean_abs").get<double>(), row.at("lambda_p_final").get<double>());
        } else {
            std::printf("%-14s %6llu %10s %10s %12s %10s  failed: %s\n", row.at("variant").get<std::string>().c_str(),
                        static_cast<unsigned long long>(row.at("seed").get<std::uint64_t>()), "-", "-", "-", "-",
                        row.at("error").get<std::string>().c_str());
        }
    }
    return 0;
}

int cmd_check(const json& options) {
    json r;
    const auto s = call(physnet_check, options, r);
    if (r.is_null()) return fail(s);
    for (const auto& c : r.at("checks")) {
        std::printf("%-4s %-24s observed %-12.6g expected %-12.6g tol %g%s%s\n",
                    c.at("passed").get<bool>() ? "ok" : "FAIL", c.at("name").get<std::string>().c_str(),
                    c.at("observed").get<double>(), c.at("expected").get<double>(), c.at("tolerance").get<double>(),
                    c.contains("detail") ? "  " : "", c.value("detail", "").c_str());
    }
    std::printf("max gradient error %.3g\nfront speed error %.3g\nlogistic error %.3g\n",
                r.at("max_grad_error").get<double>(), r.at("front_speed_error").get<double>(),
                r.at("logistic_error").get<double>());
    if (s != PHYSNET_OK) return fail(s);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PhysNet: physics-informed tumour classification on synthetic Fisher-KPP data"};
    app.require_subcommand(1);
    app.set_version_flag("--version", physnet_version());

    auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
    std::string gen_config, gen_out;
    std::optional<long long> gen_n;
    std::optional<std::uint64_t> gen_seed;
    gen->add_option("--config", gen_config, "JSON generation options");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--n", gen_n, "samples per class");
    gen->add_option("--seed", gen_seed, "dataset seed");

    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_data, tr_out;
    TrainFlags tr_flags;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "checkpoint directory")->required();
    tr_flags.attach(tr);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_data, ev_model, ev_report, ev_split = "test";
    bool ev_no_finetune = false;
    std::optional<std::size_t> ev_steps;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--model", ev_model, "checkpoint directory")->required();
    ev->add_option("--report-dir", ev_report, std::string("report directory (default $") + kReportEnv + "/eval)");
    ev->add_option("--split", ev_split, "train, val or test");
    ev->add_flag("--no-finetune", ev_no_finetune, "skip the per-class parameter fine-tune");
    ev->add_option("--finetune-steps", ev_steps);

    auto* ab = app.add_subcommand("ablate", "run the ablation grid");
    std::string ab_data, ab_out, ab_report;
    std::vector<std::uint64_t> ab_seeds;
    std::vector<std::string> ab_variants;
    bool ab_per_class = false;
    TrainFlags ab_flags;
    ab->add_option("--data", ab_data, "dataset directory")->required();
    ab->add_option("--out", ab_out, "directory for per-run checkpoints")->required();
    ab->add_option("--report-dir", ab_report);
    ab->add_option("--seeds", ab_seeds)->delimiter(',');
    ab->add_option("--variants", ab_variants, "full,no_physics,no_boundary,no_temporal,fixed_lambda")->delimiter(',');
    ab->add_flag("--per-class-finetune", ab_per_class);
    ab_flags.attach(ab);

    auto* ck = app.add_subcommand("check", "run the oracle battery");
    std::string ck_report, ck_fault;
    std::optional<double> ck_tol, ck_model_tol;
    ck->add_option("--report-dir", ck_report);
    ck->add_option("--grad-tol", ck_tol, "per-op gradient tolerance");
    ck->add_option("--model-grad-tol", ck_model_tol, "whole-model gradient tolerance");
    ck->add_option("--inject-fault", ck_fault, "laplacian_sign");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*gen) return cmd_gen(gen_config, gen_out, gen_n, gen_seed);
        if (*tr) return cmd_train(tr_data, tr_out, tr_flags);
        if (*ev) {
            json o{{"data", ev_data}, {"model", ev_model}, {"report", report_dir(ev_report, "eval")},
                   {"split", ev_split}};
            if (ev_no_finetune) o["per_class_finetune"] = o["per_sample_finetune"] = false;
            if (ev_steps) o["finetune_steps"] = *ev_steps;
            return cmd_eval(o);
        }
        if (*ab) {
            json o{{"data", ab_data}, {"out", ab_out}, {"report", report_dir(ab_report, "ablate")},
                   {"per_class_finetune", ab_per_class}};
            if (!ab_seeds.empty()) o["seeds"] = ab_seeds;
            if (!ab_variants.empty()) o["variants"] = ab_variants;
            ab_flags.apply(o);
            return cmd_ablate(o);
        }
        if (*ck) {
            json o{{"report", report_dir(ck_report, "check")}};
            if (ck_tol) o["grad_tol"] = *ck_tol;
            if (ck_model_tol) o["model_grad_tol"] = *ck_model_tol;
            if (!ck_fault.empty()) o["inject_fault"] = ck_fault;
            return cmd_check(o);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
