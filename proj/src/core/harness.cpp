#include "physnet/harness.hpp"

#include "physnet/io.hpp"
#include "physnet/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace physnet::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_keys(const json& o, std::initializer_list<const char*> known, const char* cmd) {
    if (!o.is_object()) throw UsageError(std::string(cmd) + ": options must be a JSON object");
    for (const auto& [k, v] : o.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
            throw UsageError(std::string(cmd) + ": unknown option '" + k + "'");
        }
    }
}

template <class T>
T option(const json& o, const char* key, T fallback, const char* cmd) {
    if (!o.contains(key)) return fallback;
    try {
        return o.at(key).get<T>();
    } catch (const json::exception&) {
        throw UsageError(std::string(cmd) + ": option '" + key + "' has the wrong type");
    }
}

fs::path required_path(const json& o, const char* key, const char* cmd) {
    const auto s = option<std::string>(o, key, "", cmd);
    if (s.empty()) throw UsageError(std::string(cmd) + ": missing required option '" + key + "'");
    return s;
}

void write_json(const fs::path& path, const json& j) { io::write_file(path, j.dump(2) + "\n"); }

std::string fmt(double v, int precision = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    return buf;
}

std::string csv_number(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

train::TrainConfig resolve_config(const json& o, const char* cmd) {
    try {
        train::TrainConfig cfg;
        if (o.contains("config_file")) {
            const fs::path path = o.at("config_file").get<std::string>();
            if (!fs::exists(path)) throw UsageError(std::string(cmd) + ": config file not found: " + path.string());
            cfg = train::train_config_from_json(json::parse(io::read_file(path)));
        }
        if (o.contains("config")) cfg = train::merge_config(cfg, o.at("config"));
        return cfg;
    } catch (const UsageError&) {
        throw;
    } catch (const json::exception& e) {
        throw UsageError(std::string(cmd) + ": bad config: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string(cmd) + ": " + e.what());
    }
}

json dataset_tag(const sim::Dataset& data) {
    return {{"manifest_sha256", data.manifest_checksum}, {"seed", data.manifest.at("seed")}};
}

void check_compatible(const sim::Dataset& data, const train::TrainConfig& cfg, const char* cmd) {
    if (data.image_size != cfg.backbone.input_size) {
        throw UsageError(std::string(cmd) + ": dataset images are " + std::to_string(data.image_size) +
                         " px but backbone.input_size is " + std::to_string(cfg.backbone.input_size));
    }
}

/// Trains and writes checkpoint, logs, resolved config and summary to `out`.
train::TrainResult train_to_dir(const sim::Dataset& data, const train::TrainConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    const std::string hash = train::config_hash(cfg);
    write_json(out / "resolved_config.json",
               {{"command", "train"}, {"config", train::to_json(cfg)}, {"config_hash", hash}, {"seed", cfg.seed},
                {"dataset", dataset_tag(data)}});
    std::string jsonl, csv = train::csv_header() + "\n";
    auto on_epoch = [&](const train::EpochRecord& rec, const ad::ParameterSet&) {
        json line = train::to_json(rec);
        line["seed"] = cfg.seed;
        line["config_hash"] = hash;
        jsonl += line.dump() + "\n";
        csv += train::to_csv_row(rec) + "\n";
        io::write_file(out / "train_log.jsonl", jsonl);
        io::write_file(out / "train_log.csv", csv);
    };
    train::TrainResult result;
    try {
        result = train::train(data, cfg, on_epoch);
    } catch (const train::TrainingDiverged& e) {
        write_json(out / "train_summary.json", {{"status", "diverged"},
                                                {"error", e.what()},
                                                {"epoch", e.epoch},
                                                {"batch", e.batch},
                                                {"loss", e.loss_name},
                                                {"config_hash", hash},
                                                {"seed", cfg.seed}});
        throw;
    }
    ad::save_parameters(out / "model.params", result.params);
    const std::string params_sha = io::sha256_file(out / "model.params");
    write_json(out / "model.json", {{"format", "physnet.model"},
                                    {"version", 1},
                                    {"backbone", model::to_json(cfg.backbone)},
                                    {"class_names", data.class_names},
                                    {"parameter_count", ad::parameter_count(result.params)},
                                    {"params_file", "model.params"},
                                    {"params_sha256", params_sha},
                                    {"config_hash", hash},
                                    {"seed", cfg.seed}});
    const auto phys = model::expose_physical_params(result.params);
    write_json(out / "train_summary.json", {{"status", "ok"},
                                            {"config_hash", hash},
                                            {"seed", cfg.seed},
                                            {"dataset", dataset_tag(data)},
                                            {"epochs", result.epochs.size()},
                                            {"final", train::to_json(result.epochs.back())},
                                            {"D", phys.D},
                                            {"rho", phys.rho},
                                            {"K", phys.K},
                                            {"params_sha256", params_sha}});
    return result;
}

std::string summary_text(const json& m, const std::vector<std::string>& names) {
    std::ostringstream os;
    os << "PhysNet evaluation, split " << m.at("split").get<std::string>() << ", n = " << m.at("n") << "\n";
    os << "seed " << m.at("seed") << ", config " << m.at("config_hash").get<std::string>() << ", dataset "
       << m.at("dataset").at("manifest_sha256").get<std::string>().substr(0, 16) << "\n\n";
    os << "accuracy   " << fmt(m.at("accuracy")) << "\n";
    os << "macro-F1   " << fmt(m.at("macro_f1")) << "\n";
    os << "mean |R|   " << fmt(m.at("residual_mean_abs")) << " +- " << fmt(m.at("residual_sd_abs")) << "\n";
    os << "D rho K    " << fmt(m.at("D")) << " " << fmt(m.at("rho")) << " " << fmt(m.at("K")) << "\n";
    if (!m.at("u_mse").is_null()) os << "u MSE      " << fmt(m.at("u_mse")) << "\n";
    os << "\nconfusion (rows: true, columns: predicted)\n";
    const auto& conf = m.at("confusion");
    for (std::size_t c = 0; c < names.size(); ++c) {
        os << "  " << names[c];
        for (const auto& v : conf[c]) os << " " << v.get<std::size_t>();
        os << "\n";
    }
    if (m.contains("per_class")) {
        os << "\nper-class fine-tuned D, rho, K\n";
        for (const auto& c : m.at("per_class")) {
            const auto& p = c.at("pooled");
            os << "  " << c.at("name").get<std::string>() << " (n=" << c.at("support") << "): " << fmt(p.at("D"))
               << " " << fmt(p.at("rho")) << " " << fmt(p.at("K")) << "\n";
        }
    }
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

json run_gen(const json& o) {
    const char* cmd = "gen";
    require_keys(o, {"out", "n_per_class", "seed", "generator", "profiles"}, cmd);
    const fs::path out = required_path(o, "out", cmd);
    const auto n = option<std::int64_t>(o, "n_per_class", 0, cmd);
    if (n < 1) throw UsageError("gen: n_per_class must be at least 1");
    const auto seed = option<std::uint64_t>(o, "seed", 1, cmd);
    sim::GeneratorConfig gen;
    std::vector<sim::ClassProfile> profiles = sim::default_profiles();
    try {
        if (o.contains("generator")) gen = sim::generator_config_from_json(o.at("generator"));
        if (o.contains("profiles")) {
            profiles.clear();
            for (const json& p : o.at("profiles")) profiles.push_back(sim::profile_from_json(p));
        }
    } catch (const std::exception& e) {
        throw UsageError(std::string("gen: ") + e.what());
    }
    const auto manifest = sim::generate_dataset(profiles, static_cast<std::size_t>(n), seed, out, gen);
    return {{"manifest_sha256", manifest.checksum},
            {"seed", seed},
            {"n_per_class", n},
            {"classes", manifest.json.at("classes")},
            {"class_counts", manifest.json.at("class_counts")},
            {"split_counts", manifest.json.at("split_counts")},
            {"n_samples", manifest.json.at("samples").size()}};
}

json run_train(const json& o) {
    const char* cmd = "train";
    require_keys(o, {"data", "out", "config_file", "config"}, cmd);
    const fs::path data_dir = required_path(o, "data", cmd);
    const fs::path out = required_path(o, "out", cmd);
    const train::TrainConfig cfg = resolve_config(o, cmd);
    const sim::Dataset data = sim::load_dataset(data_dir, true);
    check_compatible(data, cfg, cmd);
    train_to_dir(data, cfg, out);
    return json::parse(io::read_file(out / "train_summary.json"));
}

Checkpoint load_checkpoint(const fs::path& dir) {
    for (const char* f : {"model.json", "model.params", "resolved_config.json"}) {
        if (!fs::exists(dir / f)) throw std::runtime_error("missing checkpoint file " + (dir / f).string());
    }
    Checkpoint c;
    const json meta = json::parse(io::read_file(dir / "model.json"));
    if (meta.value("format", "") != "physnet.model") throw std::runtime_error(dir.string() + ": not a physnet model");
    const json resolved = json::parse(io::read_file(dir / "resolved_config.json"));
    c.config = train::train_config_from_json(resolved.at("config"));
    c.backbone = model::backbone_from_json(meta.at("backbone"));
    c.class_names = meta.at("class_names").get<std::vector<std::string>>();
    c.config_hash = meta.at("config_hash").get<std::string>();
    if (io::sha256_file(dir / "model.params") != meta.at("params_sha256").get<std::string>()) {
        throw std::runtime_error(dir.string() + ": model.params does not match its checksum");
    }
    c.params = ad::load_parameters(dir / "model.params");
    return c;
}

json run_eval(const json& o) {
    const char* cmd = "eval";
    require_keys(o,
                 {"data", "model", "report", "split", "per_class_finetune", "per_sample_finetune", "finetune_steps",
                  "finetune_lr"},
                 cmd);
    const fs::path data_dir = required_path(o, "data", cmd);
    const fs::path model_dir = required_path(o, "model", cmd);
    const fs::path report = required_path(o, "report", cmd);
    sim::Split split;
    try {
        split = sim::split_from_string(option<std::string>(o, "split", "test", cmd));
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("eval: ") + e.what());
    }
    const Checkpoint ckpt = load_checkpoint(model_dir);
    train::EvaluateOptions eo;
    eo.per_class_finetune = option<bool>(o, "per_class_finetune", true, cmd);
    eo.per_sample_finetune = option<bool>(o, "per_sample_finetune", true, cmd);
    eo.finetune_steps = option<std::size_t>(o, "finetune_steps", ckpt.config.finetune_steps, cmd);
    eo.finetune_lr = option<double>(o, "finetune_lr", ckpt.config.finetune_lr, cmd);
    eo.batch_size = ckpt.config.eval_batch_size;

    const sim::Dataset data = sim::load_dataset(data_dir, true);
    if (data.class_names != ckpt.class_names) throw std::runtime_error("eval: dataset classes differ from the model's");
    const auto samples = data.split(split);
    if (samples.empty()) throw std::runtime_error("eval: split '" + sim::to_string(split) + "' is empty");
    const auto metrics = train::evaluate(ckpt.params, ckpt.backbone, samples, data.class_names, eo);

    json m = train::to_json(metrics);
    m["split"] = sim::to_string(split);
    m["seed"] = ckpt.config.seed;
    m["config_hash"] = ckpt.config_hash;
    m["dataset"] = dataset_tag(data);
    m["class_names"] = data.class_names;

    fs::create_directories(report);
    write_json(report / "resolved_config.json", {{"command", "eval"},
                                                 {"config", train::to_json(ckpt.config)},
                                                 {"config_hash", ckpt.config_hash},
                                                 {"seed", ckpt.config.seed},
                                                 {"dataset", dataset_tag(data)},
                                                 {"split", sim::to_string(split)},
                                                 {"per_class_finetune", eo.per_class_finetune},
                                                 {"per_sample_finetune", eo.per_sample_finetune},
                                                 {"finetune_steps", eo.finetune_steps},
                                                 {"finetune_lr", eo.finetune_lr}});
    write_json(report / "metrics.json", m);
    io::write_file(report / "summary.txt", summary_text(m, data.class_names));

    const std::string tag = std::to_string(ckpt.config.seed) + "," + ckpt.config_hash;
    std::string conf = "seed,config_hash,true_class,predicted_class,count\n";
    for (std::size_t t = 0; t < metrics.confusion.size(); ++t) {
        for (std::size_t p = 0; p < metrics.confusion[t].size(); ++p) {
            conf += tag + "," + data.class_names[t] + "," + data.class_names[p] + "," +
                    std::to_string(metrics.confusion[t][p]) + "\n";
        }
    }
    io::write_file(report / "confusion.csv", conf);
    std::string violins = "seed,config_hash,class,kind,sample,D,rho,K,residual_loss\n";
    for (const auto& c : metrics.per_class) {
        auto row = [&](const char* kind, const std::string& idx, const train::PhysicalEstimate& e) {
            violins += tag + "," + c.name + "," + kind + "," + idx + "," + csv_number(e.D) + "," + csv_number(e.rho) +
                       "," + csv_number(e.K) + "," + csv_number(e.residual_loss) + "\n";
        };
        if (eo.per_class_finetune && c.support) row("pooled", "", c.pooled);
        for (std::size_t k = 0; k < c.per_sample.size(); ++k) row("sample", std::to_string(k), c.per_sample[k]);
    }
    io::write_file(report / "physical_params.csv", violins);
    if (fs::exists(model_dir / "train_log.csv")) {
        std::istringstream in(io::read_file(model_dir / "train_log.csv"));
        std::string line, curves;
        bool header = true;
        while (std::getline(in, line)) {
            curves += (header ? "seed,config_hash," : tag + ",") + line + "\n";
            header = false;
        }
        io::write_file(report / "loss_curves.csv", curves);
    }
    return m;
}

train::TrainConfig apply_variant(const train::TrainConfig& base, const std::string& variant) {
    train::TrainConfig c = base;
    if (variant == "full") return c;
    if (variant == "no_physics") c.disable_physics = true;
    else if (variant == "no_boundary") c.disable_boundary = true;
    else if (variant == "no_temporal") c.disable_temporal = true;
    else if (variant == "fixed_lambda") c.scheduler.mode = train::LambdaMode::fixed;
    else throw UsageError("unknown ablation variant '" + variant +
                          "' (full, no_physics, no_boundary, no_temporal, fixed_lambda)");
    return c;
}

json run_ablate(const json& o) {
    const char* cmd = "ablate";
    require_keys(o, {"data", "out", "report", "config_file", "config", "seeds", "variants", "per_class_finetune"}, cmd);
    const fs::path data_dir = required_path(o, "data", cmd);
    const fs::path out = required_path(o, "out", cmd);
    const fs::path report = required_path(o, "report", cmd);
    const train::TrainConfig base = resolve_config(o, cmd);
    const auto seeds = option<std::vector<std::uint64_t>>(o, "seeds", {1, 2, 3, 4, 5}, cmd);
    const auto variants = option<std::vector<std::string>>(
        o, "variants", {"full", "no_physics", "no_boundary", "no_temporal", "fixed_lambda"}, cmd);
    const bool per_class = option<bool>(o, "per_class_finetune", false, cmd);
    if (seeds.empty() || variants.empty()) throw UsageError("ablate: need at least one seed and one variant");
    for (const auto& v : variants) apply_variant(base, v);

    const sim::Dataset data = sim::load_dataset(data_dir, true);
    check_compatible(data, base, cmd);
    const auto test = data.split(sim::Split::test);
    if (test.empty()) throw std::runtime_error("ablate: test split is empty");

    fs::create_directories(report);
    write_json(report / "resolved_config.json", {{"command", "ablate"},
                                                 {"config", train::to_json(base)},
                                                 {"config_hash", train::config_hash(base)},
                                                 {"seeds", seeds},
                                                 {"variants", variants},
                                                 {"per_class_finetune", per_class},
                                                 {"dataset", dataset_tag(data)}});

    json rows = json::array();
    for (const auto& variant : variants) {
        for (const auto seed : seeds) {
            train::TrainConfig cfg = apply_variant(base, variant);
            cfg.seed = seed;
            json row{{"variant", variant},
                     {"seed", seed},
                     {"config_hash", train::config_hash(cfg)},
                     {"dataset_sha256", data.manifest_checksum}};
            try {
                const auto result = train_to_dir(data, cfg, out / variant / ("seed_" + std::to_string(seed)));
                train::EvaluateOptions eo;
                eo.per_class_finetune = per_class;
                eo.finetune_steps = cfg.finetune_steps;
                eo.finetune_lr = cfg.finetune_lr;
                eo.batch_size = cfg.eval_batch_size;
                const auto m = train::evaluate(result.params, cfg.backbone, test, data.class_names, eo);
                bool constant = true;
                for (const auto& s : result.steps) constant = constant && s.lambda_p == result.steps.front().lambda_p;
                row["status"] = "ok";
                row["accuracy"] = m.accuracy;
                row["macro_f1"] = m.macro_f1;
                row["residual_mean_abs"] = m.residual_mean;
                row["residual_sd_abs"] = m.residual_sd;
                row["lambda_p_final"] = result.epochs.back().lambda_p_end;
                row["lambda_p_constant"] = constant;
                row["D"] = m.physical.D;
                row["rho"] = m.physical.rho;
                row["K"] = m.physical.K;
                if (per_class) row["per_class"] = train::to_json(m).at("per_class");
            } catch (const std::exception& e) {
                row["status"] = "failed";
                row["error"] = e.what();
            }
            rows.push_back(row);
        }
    }

    json summary = json::object();
    for (const auto& variant : variants) {
        double acc = 0, f1 = 0, res = 0;
        std::size_t ok = 0;
        for (const auto& r : rows) {
            if (r.at("variant") != variant || r.at("status") != "ok") continue;
            acc += r.at("accuracy").get<double>();
            f1 += r.at("macro_f1").get<double>();
            res += r.at("residual_mean_abs").get<double>();
            ++ok;
        }
        json s{{"runs_ok", ok}, {"runs", seeds.size()}};
        if (ok) {
            s["mean_accuracy"] = acc / static_cast<double>(ok);
            s["mean_macro_f1"] = f1 / static_cast<double>(ok);
            s["mean_residual_abs"] = res / static_cast<double>(ok);
        }
        summary[variant] = s;
    }
    if (summary.contains("full") && summary["full"].contains("mean_accuracy")) {
        for (auto& [variant, s] : summary.items()) {
            if (!s.contains("mean_accuracy")) continue;
            s["delta_accuracy_vs_full"] = s["mean_accuracy"].get<double>() - summary["full"]["mean_accuracy"].get<double>();
            s["delta_residual_vs_full"] =
                s["mean_residual_abs"].get<double>() - summary["full"]["mean_residual_abs"].get<double>();
        }
    }
    const json result{{"config_hash", train::config_hash(base)},
                      {"seeds", seeds},
                      {"dataset", dataset_tag(data)},
                      {"rows", rows},
                      {"summary", summary}};
    write_json(report / "ablation.json", result);
    std::string csv = "variant,seed,config_hash,dataset_sha256,status,accuracy,macro_f1,residual_mean_abs,"
                      "residual_sd_abs,lambda_p_final,D,rho,K\n";
    for (const auto& r : rows) {
        csv += r.at("variant").get<std::string>() + "," + std::to_string(r.at("seed").get<std::uint64_t>()) + "," +
               r.at("config_hash").get<std::string>() + "," + r.at("dataset_sha256").get<std::string>() + "," +
               r.at("status").get<std::string>();
        for (const char* k : {"accuracy", "macro_f1", "residual_mean_abs", "residual_sd_abs", "lambda_p_final", "D",
                              "rho", "K"}) {
            csv += "," + (r.contains(k) ? csv_number(r.at(k).get<double>()) : std::string());
        }
        csv += "\n";
    }
    io::write_file(report / "ablation.csv", csv);
    return result;
}

}  // namespace physnet::harness
