#pragma once

// Run-level entry points behind the C API: data generation, training,
// evaluation, ablation sweeps and the self-check battery. Each takes a JSON
// options object and returns a JSON summary; files go where the options say.

#include "physnet/model.hpp"
#include "physnet/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace physnet::harness {

enum class Status { ok = 0, usage = 1, runtime = 2, check = 3 };

/// Bad options or configuration (exit code 1).
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// options: out, n_per_class, seed, [generator], [profiles]
nlohmann::json run_gen(const nlohmann::json& options);

/// options: data, out, [config_file], [config] (overrides on top of the file)
/// Writes model.params, model.json, train_log.jsonl, train_log.csv,
/// resolved_config.json and train_summary.json under `out`.
nlohmann::json run_train(const nlohmann::json& options);

/// options: data, model, report, [split], [per_class_finetune],
/// [per_sample_finetune], [finetune_steps], [finetune_lr]
nlohmann::json run_eval(const nlohmann::json& options);

/// options: data, out, report, [config_file], [config], [seeds], [variants],
/// [per_class_finetune]. Variants: full, no_physics, no_boundary,
/// no_temporal, fixed_lambda.
nlohmann::json run_ablate(const nlohmann::json& options);

/// options: [report], [grad_tol], [model_grad_tol], [inject_fault]
/// Result has "passed" plus one entry per check.
nlohmann::json run_check(const nlohmann::json& options);

/// Applies an ablation variant name to a config.
train::TrainConfig apply_variant(const train::TrainConfig& base, const std::string& variant);

/// The reduced network used by the gradient checks.
model::BackboneConfig tiny_backbone();

/// Loads a checkpoint directory written by run_train.
struct Checkpoint {
    model::BackboneConfig backbone;
    train::TrainConfig config;
    std::vector<std::string> class_names;
    ad::ParameterSet params;
    std::string config_hash;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace physnet::harness
