#include "physnet/physnet.h"

#include "physnet/harness.hpp"
#include "physnet/io.hpp"
#include "physnet/simulator.hpp"
#include "physnet/training.hpp"

#include <cstring>
#include <string>

using nlohmann::json;
using physnet::harness::UsageError;

struct physnet_dataset {
    physnet::sim::Dataset data;
};

struct physnet_model {
    physnet::harness::Checkpoint ckpt;
};

namespace {

thread_local std::string g_last_error;

char* copy_string(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

template <class F>
physnet_status guarded(F&& f) {
    g_last_error.clear();
    try {
        return f();
    } catch (const UsageError& e) {
        g_last_error = e.what();
        return PHYSNET_ERR_USAGE;
    } catch (const json::parse_error& e) {
        g_last_error = std::string("invalid JSON: ") + e.what();
        return PHYSNET_ERR_USAGE;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return PHYSNET_ERR_RUNTIME;
    } catch (...) {
        g_last_error = "unknown error";
        return PHYSNET_ERR_RUNTIME;
    }
}

physnet_status usage(const char* msg) {
    g_last_error = msg;
    return PHYSNET_ERR_USAGE;
}

json parse_options(const char* options_json) {
    if (!options_json) return json::object();
    return json::parse(options_json);
}

template <class Run>
physnet_status run(const char* options_json, char** result, Run&& fn) {
    return guarded([&] {
        const json r = fn(parse_options(options_json));
        if (result) *result = copy_string(r.dump(2));
        return PHYSNET_OK;
    });
}

}  // namespace

extern "C" {

const char* physnet_version(void) { return "1.0.0"; }

const char* physnet_last_error(void) { return g_last_error.c_str(); }

void physnet_string_free(char* s) { delete[] s; }

physnet_status physnet_generate(const char* o, char** r) { return run(o, r, physnet::harness::run_gen); }
physnet_status physnet_train(const char* o, char** r) { return run(o, r, physnet::harness::run_train); }
physnet_status physnet_evaluate(const char* o, char** r) { return run(o, r, physnet::harness::run_eval); }
physnet_status physnet_ablate(const char* o, char** r) { return run(o, r, physnet::harness::run_ablate); }

physnet_status physnet_check(const char* options_json, char** result) {
    return guarded([&] {
        const json r = physnet::harness::run_check(parse_options(options_json));
        if (result) *result = copy_string(r.dump(2));
        if (r.at("passed").get<bool>()) return PHYSNET_OK;
        g_last_error = "one or more checks failed";
        return PHYSNET_ERR_CHECK;
    });
}

physnet_status physnet_resolve_config(const char* config_path, const char* overrides_json, char** result) {
    if (!result) return usage("physnet_resolve_config: result is NULL");
    return guarded([&] {
        physnet::train::TrainConfig cfg;
        try {
            if (config_path) {
                cfg = physnet::train::train_config_from_json(json::parse(physnet::io::read_file(config_path)));
            }
            if (overrides_json) cfg = physnet::train::merge_config(cfg, json::parse(overrides_json));
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        } catch (const json::exception& e) {
            throw UsageError(e.what());
        }
        *result = copy_string(
            json{{"config", physnet::train::to_json(cfg)}, {"config_hash", physnet::train::config_hash(cfg)}}.dump(2));
        return PHYSNET_OK;
    });
}

physnet_status physnet_dataset_open(const char* dir, int verify, physnet_dataset** out) {
    if (!dir || !out) return usage("physnet_dataset_open: NULL argument");
    *out = nullptr;
    return guarded([&] {
        auto* ds = new physnet_dataset{physnet::sim::load_dataset(dir, verify != 0)};
        *out = ds;
        return PHYSNET_OK;
    });
}

void physnet_dataset_free(physnet_dataset* ds) { delete ds; }

physnet_status physnet_dataset_info(const physnet_dataset* ds, size_t* n_samples, size_t* n_classes,
                                    size_t* image_size) {
    if (!ds) return usage("physnet_dataset_info: NULL dataset");
    if (n_samples) *n_samples = ds->data.samples.size();
    if (n_classes) *n_classes = ds->data.n_classes();
    if (image_size) *image_size = ds->data.image_size;
    return PHYSNET_OK;
}

const char* physnet_dataset_checksum(const physnet_dataset* ds) {
    return ds ? ds->data.manifest_checksum.c_str() : nullptr;
}

physnet_status physnet_model_load(const char* dir, physnet_model** out) {
    if (!dir || !out) return usage("physnet_model_load: NULL argument");
    *out = nullptr;
    return guarded([&] {
        *out = new physnet_model{physnet::harness::load_checkpoint(dir)};
        return PHYSNET_OK;
    });
}

void physnet_model_free(physnet_model* m) { delete m; }

physnet_status physnet_model_physical(const physnet_model* m, double* D, double* rho, double* K) {
    if (!m) return usage("physnet_model_physical: NULL model");
    return guarded([&] {
        const auto p = physnet::model::expose_physical_params(m->ckpt.params);
        if (D) *D = p.D;
        if (rho) *rho = p.rho;
        if (K) *K = p.K;
        return PHYSNET_OK;
    });
}

physnet_status physnet_model_shape(const physnet_model* m, size_t* image_size, size_t* tap_size, size_t* n_classes) {
    if (!m) return usage("physnet_model_shape: NULL model");
    if (image_size) *image_size = m->ckpt.backbone.input_size;
    if (tap_size) *tap_size = m->ckpt.backbone.tap_size();
    if (n_classes) *n_classes = m->ckpt.class_names.size();
    return PHYSNET_OK;
}

physnet_status physnet_model_predict(const physnet_model* m, const double* pixels, size_t n, int* labels, double* u) {
    if (!m || !pixels || !labels) return usage("physnet_model_predict: NULL argument");
    if (n == 0) return usage("physnet_model_predict: no images");
    return guarded([&] {
        const std::size_t size = m->ckpt.backbone.input_size;
        const std::size_t px = size * size;
        std::vector<std::vector<double>> images(n);
        std::vector<const std::vector<double>*> ptrs;
        for (std::size_t k = 0; k < n; ++k) {
            images[k].assign(pixels + k * px, pixels + (k + 1) * px);
            ptrs.push_back(&images[k]);
        }
        const auto preds = physnet::train::predict(m->ckpt.params, m->ckpt.backbone, ptrs, m->ckpt.config.eval_batch_size);
        for (std::size_t k = 0; k < n; ++k) {
            labels[k] = preds[k].label;
            if (u) {
                const auto v = preds[k].u.values();
                std::memcpy(u + k * v.size(), v.data(), v.size() * sizeof(double));
            }
        }
        return PHYSNET_OK;
    });
}

physnet_status physnet_model_evaluate(const physnet_model* m, const physnet_dataset* ds, const char* split,
                                      char** result) {
    if (!m || !ds || !result) return usage("physnet_model_evaluate: NULL argument");
    return guarded([&] {
        physnet::sim::Split s;
        try {
            s = physnet::sim::split_from_string(split ? split : "test");
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        const auto samples = ds->data.split(s);
        if (samples.empty()) throw std::runtime_error("split is empty");
        const auto r = physnet::train::evaluate(m->ckpt.params, m->ckpt.backbone, samples, ds->data.class_names);
        json j = physnet::train::to_json(r);
        j["seed"] = m->ckpt.config.seed;
        j["config_hash"] = m->ckpt.config_hash;
        *result = copy_string(j.dump(2));
        return PHYSNET_OK;
    });
}

}  // extern "C"
