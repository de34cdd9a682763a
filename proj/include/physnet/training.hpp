#pragma once

// Loss terms, loss-weight scheduling, optimizer, augmentation and the
// training / evaluation loops.

#include "physnet/autodiff.hpp"
#include "physnet/model.hpp"
#include "physnet/simulator.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace physnet::train {

// ---------------------------------------------------------------------------
// Loss terms

/// mean over batch and grid of (dudt - D lap(u) - rho u (1 - u/K))^2.
ad::Tensor physics_loss(const ad::Tensor& u, const ad::Tensor& dudt, const ad::Tensor& D, const ad::Tensor& rho,
                        const ad::Tensor& K);

/// Mean of lap(u)^2 over the high-gradient points of each slice. The mask is
/// computed from the forward values and treated as a constant. Returns a
/// zero constant when no point is selected.
ad::Tensor boundary_loss(const ad::Tensor& u, double quantile);

/// mean of (u2 - u1 - dt * dudt1)^2.
ad::Tensor temporal_loss(const ad::Tensor& u1, const ad::Tensor& dudt1, const ad::Tensor& u2, double dt);

struct LossWeights {
    double physics = 0.0;
    double boundary = 0.0;
    double temporal = 0.0;
};

struct LossBreakdown {
    double l_cls = 0.0;
    double l_physics = 0.0;
    double l_boundary = 0.0;
    double l_temporal = 0.0;
    double lambda_p = 0.0;
    double lambda_b = 0.0;
    double lambda_t = 0.0;
    double total = 0.0;
};

struct LossTerms {
    ad::Tensor logits;
    ad::Tensor cls;
    ad::Tensor physics;
    ad::Tensor boundary;
    ad::Tensor temporal;
};

/// cls + lambda_p physics + lambda_b boundary + lambda_t temporal, with the
/// breakdown computed in the same order so `total` matches bit for bit.
std::pair<ad::Tensor, LossBreakdown> total_loss(const LossTerms& terms, const LossWeights& w);

// ---------------------------------------------------------------------------
// Loss-weight scheduling

enum class LambdaMode { adaptive, literal, fixed };
std::string to_string(LambdaMode m);
LambdaMode lambda_mode_from_string(const std::string& s);

struct SchedulerConfig {
    LambdaMode mode = LambdaMode::adaptive;
    double lambda0 = 0.01;
    double alpha = 0.5;
    double lambda_max = 0.1;
    double ema_decay = 0.999;
    double epsilon = 1e-8;
    double fixed_lambda = 0.05;
};

struct EmaTracker {
    double value = 0.0;
    double decay = 0.999;
    bool initialized = false;

    /// First call seeds the average; later calls blend decay * ema + (1 - decay) * v.
    void update(double v);
};

/// The weight for the current classification loss, without history:
///  adaptive: min(lambda_max, lambda0 * exp(alpha * (ema / (l + eps) - 1)))
///  literal:  lambda0 * exp(-alpha * l / ema)
///  fixed:    fixed_lambda
double adaptive_lambda(const EmaTracker& tracker, double l_cls_now, const SchedulerConfig& cfg);

/// Per-iteration scheduler. Adaptive mode never lowers the weight it has
/// already reached (the formula alone drifts back down whenever the
/// classification loss plateaus).
class LambdaScheduler {
public:
    explicit LambdaScheduler(SchedulerConfig cfg);

    /// Returns the weight for this iteration, then folds l_cls into the EMA.
    double step(double l_cls);
    double current() const { return current_; }
    const EmaTracker& tracker() const { return ema_; }

private:
    SchedulerConfig cfg_;
    EmaTracker ema_;
    double current_;
};

// ---------------------------------------------------------------------------
// Optimizer and learning rate

struct AdamState {
    std::size_t step = 0;
    ad::ParameterSet m;
    ad::ParameterSet v;
};

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Decoupled weight decay (p -= lr * wd * p) followed by the bias-corrected
/// adaptive-moment update. Only parameters present in `grads` are touched.
void adamw_step(ad::ParameterSet& params, const ad::GradientMap& grads, AdamState& state, double lr,
                double weight_decay, const AdamOptions& opts = {});

/// lr_min + (lr0 - lr_min) (1 + cos(pi e / E)) / 2.
double cosine_lr(double epoch, double total_epochs, double lr0, double lr_min);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOptions {
    double max_rotation_deg = 15.0;
    double flip_probability = 0.5;
    bool jitter = true;
    double jitter_range = 0.1;  // brightness and contrast in [1 - r, 1 + r]
};

struct GeometricTransform {
    double rotation_deg = 0.0;
    bool flip = false;
};

struct PhotometricTransform {
    double brightness = 1.0;
    double contrast = 1.0;
};

struct AugmentPair {
    std::vector<double> view1;
    std::vector<double> view2;
    GeometricTransform geometric;
    std::array<PhotometricTransform, 2> photometric;
};

std::vector<double> apply_geometric(const std::vector<double>& image, std::size_t size, const GeometricTransform& g);
std::vector<double> apply_photometric(const std::vector<double>& image, const PhotometricTransform& p);

/// One shared geometric transform for both views, independent photometric
/// jitter per view.
AugmentPair make_augmented_pair(const std::vector<double>& image, std::size_t size, std::uint64_t seed,
                                const AugmentOptions& opts = {});

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    model::BackboneConfig backbone;
    std::size_t epochs = 100;
    std::size_t batch_size = 16;
    double learning_rate = 2e-4;
    double lr_min_ratio = 0.01;
    double weight_decay = 1e-4;
    double lambda_b = 0.005;
    double lambda_t = 0.01;
    SchedulerConfig scheduler;
    double pseudo_dt = 1.0;
    double boundary_quantile = 0.8;
    AugmentOptions augment;
    std::uint64_t seed = 1;
    bool disable_physics = false;
    bool disable_boundary = false;
    bool disable_temporal = false;
    /// Trains only backbone + classifier (no field heads, no second view).
    bool physics_free = false;
    std::size_t eval_batch_size = 32;
    std::size_t finetune_steps = 300;
    double finetune_lr = 0.02;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Unknown keys are rejected; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
/// Applies the keys of `overrides` on top of `base` (same key rules).
TrainConfig merge_config(const TrainConfig& base, const nlohmann::json& overrides);
/// First 16 hex digits of the SHA-256 of the canonical JSON dump.
std::string config_hash(const TrainConfig& c);

// ---------------------------------------------------------------------------
// Training and evaluation

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t epoch, std::size_t batch, std::string loss_name, const std::string& detail);
    std::size_t epoch;
    std::size_t batch;
    std::string loss_name;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double learning_rate = 0.0;
    LossBreakdown mean;  // per-term means over the epoch's batches
    double lambda_p_end = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    double val_mean_abs_residual = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);
std::string csv_header();
std::string to_csv_row(const EpochRecord& r);

struct TrainResult {
    ad::ParameterSet params;
    std::vector<EpochRecord> epochs;
    std::vector<LossBreakdown> steps;
};

using EpochCallback = std::function<void(const EpochRecord&, const ad::ParameterSet&)>;

/// Runs the full training loop. Every batch: build augmented pairs, run
/// both views, compute the four losses, update lambda_p, backpropagate and
/// take one AdamW step.
TrainResult train(const sim::Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Raised when a loss term (or its gradient) stops being finite.
class NonFiniteLoss : public std::domain_error {
public:
    NonFiniteLoss(std::string loss_name, const std::string& detail);
    std::string loss_name;
};

/// One training step on explicit inputs; exposed for gradient checks.
struct BatchInputs {
    std::vector<std::vector<double>> view1;
    std::vector<std::vector<double>> view2;
    std::vector<int> labels;
};

/// Forward passes and the four loss terms for one batch. In physics-free
/// mode the three auxiliary terms are zero constants.
LossTerms loss_terms(ad::Tape& tape, const model::Bindings& params, const TrainConfig& cfg, const BatchInputs& batch);

/// Builds the scalar total loss for one batch on `tape` with the given
/// weights. `breakdown` receives the per-term values.
ad::Tensor batch_loss(ad::Tape& tape, const model::Bindings& params, const TrainConfig& cfg,
                      const BatchInputs& batch, const LossWeights& w, LossBreakdown* breakdown = nullptr);

struct Prediction {
    int label = 0;
    std::vector<double> logits;
    grid::GridField u{3, 3};
    grid::GridField dudt{3, 3};
    grid::GridField u_gate{3, 3};  // sigmoid output before scaling by K
};

std::vector<Prediction> predict(const ad::ParameterSet& params, const model::BackboneConfig& backbone,
                                const std::vector<const std::vector<double>*>& images, std::size_t batch_size = 32);

struct PhysicalEstimate {
    double D = 0.0;
    double rho = 0.0;
    double K = 0.0;
    double residual_loss = 0.0;
};

/// Fits D and rho (through their softplus weights, starting from the trained
/// values) to minimise the physics loss over the given predictions, with
/// the network and K frozen. K is held fixed because u = K * gate makes
/// the loss depend on D and rho only through D*K and rho*K.
PhysicalEstimate finetune_physical(const ad::ParameterSet& params, const std::vector<const Prediction*>& preds,
                                   std::size_t steps, double lr);

struct ClassStats {
    std::string name;
    std::size_t support = 0;
    PhysicalEstimate pooled;  // one fit over the whole class
    std::vector<PhysicalEstimate> per_sample;
};

struct MetricsReport {
    std::size_t n = 0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
    double residual_mean = 0.0;
    double residual_sd = 0.0;
    model::PhysicalValues physical;
    double u_mse = 0.0;
    std::vector<ClassStats> per_class;  // filled when fine-tuning is requested
};

nlohmann::json to_json(const MetricsReport& r);

/// Accuracy and macro-F1 from labels; exposed for tests.
void classification_metrics(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t n_classes,
                            MetricsReport& out);

struct EvaluateOptions {
    bool per_class_finetune = false;
    bool per_sample_finetune = false;
    std::size_t finetune_steps = 300;
    double finetune_lr = 0.02;
    std::size_t batch_size = 32;
};

MetricsReport evaluate(const ad::ParameterSet& params, const model::BackboneConfig& backbone,
                       const std::vector<const sim::LoadedSample*>& samples,
                       const std::vector<std::string>& class_names, const EvaluateOptions& opts = {});

/// Mean |R| over the samples' predicted fields with the model's own D, rho, K.
double mean_abs_residual(const ad::ParameterSet& params, const model::BackboneConfig& backbone,
                         const std::vector<const sim::LoadedSample*>& samples, std::size_t batch_size = 32);

}  // namespace physnet::train
