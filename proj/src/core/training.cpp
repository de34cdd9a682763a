#include "physnet/training.hpp"

#include "physnet/io.hpp"
#include "physnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace physnet::train {

using nlohmann::json;
using namespace physnet::ad;
using model::Bindings;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* context) {
    if (!j.is_object()) throw std::invalid_argument(std::string(context) + ": expected a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
            throw std::invalid_argument(std::string(context) + ": unknown key '" + k + "'");
        }
    }
}

template <class F>
auto named(const char* loss_name, F&& f) {
    try {
        return f();
    } catch (const NonFiniteLoss&) {
        throw;
    } catch (const std::domain_error& e) {
        throw NonFiniteLoss(loss_name, e.what());
    }
}

Bindings constants(Tape& tape, const ParameterSet& params) {
    Bindings b;
    for (const auto& [name, p] : params) b.emplace(name, tape.constant(p.shape, p.values));
    return b;
}

std::vector<const std::vector<double>*> pointers(const std::vector<std::vector<double>>& v) {
    std::vector<const std::vector<double>*> out;
    out.reserve(v.size());
    for (const auto& x : v) out.push_back(&x);
    return out;
}

grid::GridField slice(const Tensor& t, std::size_t n) {
    const Shape& s = t.shape();
    const std::size_t hw = s[2] * s[3];
    const auto v = t.values();
    return grid::GridField(s[2], s[3], 1.0, std::vector<double>(v.begin() + n * hw, v.begin() + (n + 1) * hw));
}

int argmax(std::span<const double> v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

double bilinear(const std::vector<double>& img, std::size_t size, double y, double x) {
    const double hi = static_cast<double>(size - 1);
    y = std::clamp(y, 0.0, hi);
    x = std::clamp(x, 0.0, hi);
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const auto x0 = static_cast<std::size_t>(std::floor(x));
    const std::size_t y1 = std::min(y0 + 1, size - 1);
    const std::size_t x1 = std::min(x0 + 1, size - 1);
    const double fy = y - static_cast<double>(y0);
    const double fx = x - static_cast<double>(x0);
    const double top = img[y0 * size + x0] * (1.0 - fx) + img[y0 * size + x1] * fx;
    const double bottom = img[y1 * size + x0] * (1.0 - fx) + img[y1 * size + x1] * fx;
    return top * (1.0 - fy) + bottom * fy;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

Tensor physics_loss(const Tensor& u, const Tensor& dudt, const Tensor& D, const Tensor& rho, const Tensor& K) {
    const Tensor growth = mul(rho, mul(u, add_scalar(scale(div(u, K), -1.0), 1.0)));
    const Tensor rhs = add(mul(D, stencil_laplacian(u)), growth);
    return mean(square(sub(dudt, rhs)));
}

Tensor boundary_loss(const Tensor& u, double quantile) {
    const Shape& s = u.shape();
    if (s.size() != 4 || s[1] != 1) throw std::invalid_argument("boundary_loss: expected [N,1,H,W], got " + ad::to_string(s));
    const std::size_t hw = s[2] * s[3];
    std::vector<double> mask(u.numel(), 0.0);
    std::size_t count = 0;
    for (std::size_t n = 0; n < s[0]; ++n) {
        const grid::BoundaryMask m = grid::detect_boundary(slice(u, n), quantile);
        for (std::size_t k = 0; k < hw; ++k) {
            if (m.mask[k]) {
                mask[n * hw + k] = 1.0;
                ++count;
            }
        }
    }
    Tape& tape = u.tape();
    if (count == 0) return tape.scalar(0.0);
    const Tensor masked = mul(square(stencil_laplacian(u)), tape.constant(s, std::move(mask)));
    return scale(sum(masked), 1.0 / static_cast<double>(count));
}

Tensor temporal_loss(const Tensor& u1, const Tensor& dudt1, const Tensor& u2, double dt) {
    return mean(square(sub(sub(u2, u1), scale(dudt1, dt))));
}

std::pair<Tensor, LossBreakdown> total_loss(const LossTerms& t, const LossWeights& w) {
    const Tensor total =
        add(add(add(t.cls, scale(t.physics, w.physics)), scale(t.boundary, w.boundary)), scale(t.temporal, w.temporal));
    LossBreakdown b;
    b.l_cls = t.cls.item();
    b.l_physics = t.physics.item();
    b.l_boundary = t.boundary.item();
    b.l_temporal = t.temporal.item();
    b.lambda_p = w.physics;
    b.lambda_b = w.boundary;
    b.lambda_t = w.temporal;
    b.total = total.item();
    return {total, b};
}

// ---------------------------------------------------------------------------
// Scheduling

std::string to_string(LambdaMode m) {
    switch (m) {
        case LambdaMode::adaptive: return "adaptive";
        case LambdaMode::literal: return "literal";
        case LambdaMode::fixed: return "fixed";
    }
    return "adaptive";
}

LambdaMode lambda_mode_from_string(const std::string& s) {
    if (s == "adaptive") return LambdaMode::adaptive;
    if (s == "literal") return LambdaMode::literal;
    if (s == "fixed") return LambdaMode::fixed;
    throw std::invalid_argument("unknown lambda mode '" + s + "' (adaptive, literal, fixed)");
}

void EmaTracker::update(double v) {
    if (!initialized) {
        value = v;
        initialized = true;
    } else {
        value = decay * value + (1.0 - decay) * v;
    }
}

double adaptive_lambda(const EmaTracker& tracker, double l, const SchedulerConfig& cfg) {
    if (cfg.mode == LambdaMode::fixed) return cfg.fixed_lambda;
    if (!tracker.initialized) throw std::logic_error("adaptive_lambda: EMA tracker not initialised");
    if (cfg.mode == LambdaMode::literal) return cfg.lambda0 * std::exp(-cfg.alpha * l / tracker.value);
    return std::min(cfg.lambda_max, cfg.lambda0 * std::exp(cfg.alpha * (tracker.value / (l + cfg.epsilon) - 1.0)));
}

LambdaScheduler::LambdaScheduler(SchedulerConfig cfg)
    : cfg_(cfg), current_(cfg.mode == LambdaMode::fixed ? cfg.fixed_lambda : cfg.lambda0) {
    ema_.decay = cfg_.ema_decay;
}

double LambdaScheduler::step(double l_cls) {
    if (!ema_.initialized) ema_.update(l_cls);
    const double raw = adaptive_lambda(ema_, l_cls, cfg_);
    current_ = cfg_.mode == LambdaMode::adaptive ? std::min(cfg_.lambda_max, std::max(current_, raw)) : raw;
    ema_.update(l_cls);
    return current_;
}

// ---------------------------------------------------------------------------
// Optimizer

void adamw_step(ParameterSet& params, const GradientMap& grads, AdamState& state, double lr, double weight_decay,
                const AdamOptions& o) {
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(o.beta1, t);
    const double c2 = 1.0 - std::pow(o.beta2, t);
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("adamw_step: gradient for unknown parameter '" + name + "'");
        std::vector<double>& p = it->second.values;
        if (g.values.size() != p.size()) throw std::invalid_argument("adamw_step: size mismatch for '" + name + "'");
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.values.empty()) {
            m = ParamTensor{g.shape, std::vector<double>(p.size(), 0.0)};
            v = ParamTensor{g.shape, std::vector<double>(p.size(), 0.0)};
        }
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g.values[k];
            p[k] -= lr * weight_decay * p[k];
            m.values[k] = o.beta1 * m.values[k] + (1.0 - o.beta1) * gk;
            v.values[k] = o.beta2 * v.values[k] + (1.0 - o.beta2) * gk * gk;
            p[k] -= lr * (m.values[k] / c1) / (std::sqrt(v.values[k] / c2) + o.epsilon);
        }
    }
}

double cosine_lr(double epoch, double total_epochs, double lr0, double lr_min) {
    if (total_epochs <= 0.0) throw std::invalid_argument("cosine_lr: total_epochs must be positive");
    const double e = std::clamp(epoch, 0.0, total_epochs);
    return lr_min + (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * e / total_epochs)) / 2.0;
}

// ---------------------------------------------------------------------------
// Augmentation

std::vector<double> apply_geometric(const std::vector<double>& image, std::size_t size, const GeometricTransform& g) {
    if (image.size() != size * size) throw std::invalid_argument("apply_geometric: image is not size x size");
    if (g.rotation_deg == 0.0 && !g.flip) return image;
    const double theta = g.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);
    const double centre = static_cast<double>(size - 1) / 2.0;
    std::vector<double> out(image.size());
    for (std::size_t i = 0; i < size; ++i) {
        for (std::size_t j = 0; j < size; ++j) {
            const double y = static_cast<double>(i) - centre;
            const double x = static_cast<double>(j) - centre;
            double xs = c * x + s * y;
            const double ys = -s * x + c * y;
            if (g.flip) xs = -xs;
            out[i * size + j] = bilinear(image, size, ys + centre, xs + centre);
        }
    }
    return out;
}

std::vector<double> apply_photometric(const std::vector<double>& image, const PhotometricTransform& p) {
    std::vector<double> y(image.size());
    for (std::size_t k = 0; k < image.size(); ++k) y[k] = p.brightness * image[k];
    const double m = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    for (double& v : y) v = std::clamp(m + p.contrast * (v - m), 0.0, 1.0);
    return y;
}

AugmentPair make_augmented_pair(const std::vector<double>& image, std::size_t size, std::uint64_t seed,
                                const AugmentOptions& opts) {
    Rng rng(seed);
    AugmentPair pair;
    pair.geometric.rotation_deg = rng.uniform(-opts.max_rotation_deg, opts.max_rotation_deg);
    pair.geometric.flip = rng.bernoulli(opts.flip_probability);
    for (auto& p : pair.photometric) {
        const double b = rng.uniform(1.0 - opts.jitter_range, 1.0 + opts.jitter_range);
        const double c = rng.uniform(1.0 - opts.jitter_range, 1.0 + opts.jitter_range);
        if (opts.jitter) p = {b, c};
    }
    const std::vector<double> base = apply_geometric(image, size, pair.geometric);
    if (opts.jitter) {
        pair.view1 = apply_photometric(base, pair.photometric[0]);
        pair.view2 = apply_photometric(base, pair.photometric[1]);
    } else {
        pair.view1 = base;
        pair.view2 = base;
    }
    return pair;
}

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
    backbone.validate();
    auto require = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
    };
    require(epochs >= 1, "epochs must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(eval_batch_size >= 1, "eval_batch_size must be >= 1");
    require(learning_rate > 0.0, "learning_rate must be > 0");
    require(lr_min_ratio >= 0.0 && lr_min_ratio <= 1.0, "lr_min_ratio must lie in [0, 1]");
    require(weight_decay >= 0.0, "weight_decay must be >= 0");
    require(lambda_b >= 0.0 && lambda_t >= 0.0, "loss weights must be >= 0");
    require(pseudo_dt > 0.0, "pseudo_dt must be > 0");
    require(boundary_quantile > 0.0 && boundary_quantile < 1.0, "boundary_quantile must lie in (0, 1)");
    require(scheduler.lambda0 >= 0.0 && scheduler.lambda_max >= scheduler.lambda0, "need 0 <= lambda0 <= lambda_max");
    require(scheduler.fixed_lambda >= 0.0, "fixed_lambda must be >= 0");
    require(scheduler.alpha >= 0.0, "alpha must be >= 0");
    require(scheduler.ema_decay >= 0.0 && scheduler.ema_decay < 1.0, "ema_decay must lie in [0, 1)");
    require(scheduler.epsilon > 0.0, "scheduler epsilon must be > 0");
    require(augment.max_rotation_deg >= 0.0, "max_rotation_deg must be >= 0");
    require(augment.flip_probability >= 0.0 && augment.flip_probability <= 1.0, "flip_probability must lie in [0, 1]");
    require(augment.jitter_range >= 0.0 && augment.jitter_range < 1.0, "jitter_range must lie in [0, 1)");
    require(finetune_lr > 0.0, "finetune_lr must be > 0");
}

json to_json(const TrainConfig& c) {
    return {{"backbone", model::to_json(c.backbone)},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"lr_min_ratio", c.lr_min_ratio},
            {"weight_decay", c.weight_decay},
            {"lambda_b", c.lambda_b},
            {"lambda_t", c.lambda_t},
            {"scheduler",
             {{"mode", to_string(c.scheduler.mode)},
              {"lambda0", c.scheduler.lambda0},
              {"alpha", c.scheduler.alpha},
              {"lambda_max", c.scheduler.lambda_max},
              {"ema_decay", c.scheduler.ema_decay},
              {"epsilon", c.scheduler.epsilon},
              {"fixed_lambda", c.scheduler.fixed_lambda}}},
            {"pseudo_dt", c.pseudo_dt},
            {"boundary_quantile", c.boundary_quantile},
            {"augment",
             {{"max_rotation_deg", c.augment.max_rotation_deg},
              {"flip_probability", c.augment.flip_probability},
              {"jitter", c.augment.jitter},
              {"jitter_range", c.augment.jitter_range}}},
            {"seed", c.seed},
            {"disable_physics", c.disable_physics},
            {"disable_boundary", c.disable_boundary},
            {"disable_temporal", c.disable_temporal},
            {"physics_free", c.physics_free},
            {"eval_batch_size", c.eval_batch_size},
            {"finetune_steps", c.finetune_steps},
            {"finetune_lr", c.finetune_lr}};
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown(j,
                   {"backbone", "epochs", "batch_size", "learning_rate", "lr_min_ratio", "weight_decay", "lambda_b",
                    "lambda_t", "scheduler", "pseudo_dt", "boundary_quantile", "augment", "seed", "disable_physics",
                    "disable_boundary", "disable_temporal", "physics_free", "eval_batch_size", "finetune_steps",
                    "finetune_lr"},
                   "train config");
    TrainConfig c;
    try {
        if (j.contains("backbone")) c.backbone = model::backbone_from_json(j.at("backbone"));
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.lr_min_ratio = j.value("lr_min_ratio", c.lr_min_ratio);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.lambda_b = j.value("lambda_b", c.lambda_b);
        c.lambda_t = j.value("lambda_t", c.lambda_t);
        if (j.contains("scheduler")) {
            const json& s = j.at("scheduler");
            reject_unknown(s, {"mode", "lambda0", "alpha", "lambda_max", "ema_decay", "epsilon", "fixed_lambda"},
                           "scheduler config");
            if (s.contains("mode")) c.scheduler.mode = lambda_mode_from_string(s.at("mode").get<std::string>());
            c.scheduler.lambda0 = s.value("lambda0", c.scheduler.lambda0);
            c.scheduler.alpha = s.value("alpha", c.scheduler.alpha);
            c.scheduler.lambda_max = s.value("lambda_max", c.scheduler.lambda_max);
            c.scheduler.ema_decay = s.value("ema_decay", c.scheduler.ema_decay);
            c.scheduler.epsilon = s.value("epsilon", c.scheduler.epsilon);
            c.scheduler.fixed_lambda = s.value("fixed_lambda", c.scheduler.fixed_lambda);
        }
        c.pseudo_dt = j.value("pseudo_dt", c.pseudo_dt);
        c.boundary_quantile = j.value("boundary_quantile", c.boundary_quantile);
        if (j.contains("augment")) {
            const json& a = j.at("augment");
            reject_unknown(a, {"max_rotation_deg", "flip_probability", "jitter", "jitter_range"}, "augment config");
            c.augment.max_rotation_deg = a.value("max_rotation_deg", c.augment.max_rotation_deg);
            c.augment.flip_probability = a.value("flip_probability", c.augment.flip_probability);
            c.augment.jitter = a.value("jitter", c.augment.jitter);
            c.augment.jitter_range = a.value("jitter_range", c.augment.jitter_range);
        }
        c.seed = j.value("seed", c.seed);
        c.disable_physics = j.value("disable_physics", c.disable_physics);
        c.disable_boundary = j.value("disable_boundary", c.disable_boundary);
        c.disable_temporal = j.value("disable_temporal", c.disable_temporal);
        c.physics_free = j.value("physics_free", c.physics_free);
        c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
        c.finetune_steps = j.value("finetune_steps", c.finetune_steps);
        c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig merge_config(const TrainConfig& base, const json& overrides) {
    json j = to_json(base);
    j.merge_patch(overrides);
    return train_config_from_json(j);
}

std::string config_hash(const TrainConfig& c) { return io::sha256_hex(to_json(c).dump()).substr(0, 16); }

// ---------------------------------------------------------------------------
// Training

NonFiniteLoss::NonFiniteLoss(std::string name, const std::string& detail)
    : std::domain_error("loss '" + name + "' is not finite: " + detail), loss_name(std::move(name)) {}

TrainingDiverged::TrainingDiverged(std::size_t e, std::size_t b, std::string name, const std::string& detail)
    : std::runtime_error("training diverged at epoch " + std::to_string(e) + ", batch " + std::to_string(b) +
                         ", loss '" + name + "': " + detail),
      epoch(e),
      batch(b),
      loss_name(std::move(name)) {}

json to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch},
            {"lr", r.learning_rate},
            {"l_cls", r.mean.l_cls},
            {"l_physics", r.mean.l_physics},
            {"l_boundary", r.mean.l_boundary},
            {"l_temporal", r.mean.l_temporal},
            {"lambda_p", r.mean.lambda_p},
            {"lambda_p_end", r.lambda_p_end},
            {"lambda_b", r.mean.lambda_b},
            {"lambda_t", r.mean.lambda_t},
            {"total", r.mean.total},
            {"train_accuracy", r.train_accuracy},
            {"val_accuracy", r.val_accuracy},
            {"val_mean_abs_residual", r.val_mean_abs_residual}};
}

std::string csv_header() {
    return "epoch,lr,l_cls,l_physics,l_boundary,l_temporal,lambda_p,lambda_p_end,lambda_b,lambda_t,total,"
           "train_accuracy,val_accuracy,val_mean_abs_residual";
}

std::string to_csv_row(const EpochRecord& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.epoch << ',' << r.learning_rate << ',' << r.mean.l_cls << ',' << r.mean.l_physics << ','
       << r.mean.l_boundary << ',' << r.mean.l_temporal << ',' << r.mean.lambda_p << ',' << r.lambda_p_end << ','
       << r.mean.lambda_b << ',' << r.mean.lambda_t << ',' << r.mean.total << ',' << r.train_accuracy << ','
       << r.val_accuracy << ',' << r.val_mean_abs_residual;
    return os.str();
}

LossTerms loss_terms(Tape& tape, const Bindings& params, const TrainConfig& cfg, const BatchInputs& batch) {
    if (batch.view1.empty() || batch.view1.size() != batch.labels.size()) {
        throw std::invalid_argument("loss_terms: need one label per view-1 image");
    }
    const std::size_t size = cfg.backbone.input_size;
    LossTerms t;
    const Tensor v1 = model::image_batch(tape, pointers(batch.view1), size);
    if (cfg.physics_free) {
        const auto out = named("forward", [&] { return model::forward(cfg.backbone, params, v1, {true, false, false}); });
        t.logits = out.logits;
        t.cls = named("classification", [&] { return softmax_cross_entropy(out.logits, batch.labels); });
        t.physics = t.boundary = t.temporal = tape.scalar(0.0);
        return t;
    }
    if (batch.view2.size() != batch.view1.size()) throw std::invalid_argument("loss_terms: view counts differ");
    const auto out1 = named("forward", [&] { return model::forward(cfg.backbone, params, v1); });
    const Tensor v2 = model::image_batch(tape, pointers(batch.view2), size);
    const auto out2 = named("forward", [&] { return model::forward(cfg.backbone, params, v2, {false, true, false}); });
    t.logits = out1.logits;
    t.cls = named("classification", [&] { return softmax_cross_entropy(out1.logits, batch.labels); });
    t.physics = named("physics", [&] { return physics_loss(out1.u, out1.dudt, out1.D, out1.rho, out1.K); });
    t.boundary = named("boundary", [&] { return boundary_loss(out1.u, cfg.boundary_quantile); });
    t.temporal = named("temporal", [&] { return temporal_loss(out1.u, out1.dudt, out2.u, cfg.pseudo_dt); });
    return t;
}

Tensor batch_loss(Tape& tape, const Bindings& params, const TrainConfig& cfg, const BatchInputs& batch,
                  const LossWeights& w, LossBreakdown* breakdown) {
    auto [total, b] = named("total", [&] { return total_loss(loss_terms(tape, params, cfg, batch), w); });
    if (breakdown) *breakdown = b;
    return total;
}

TrainResult train(const sim::Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (data.image_size != cfg.backbone.input_size) {
        throw std::invalid_argument("train: dataset images are " + std::to_string(data.image_size) +
                                    " px but the backbone expects " + std::to_string(cfg.backbone.input_size));
    }
    const auto train_set = data.split(sim::Split::train);
    const auto val_set = data.split(sim::Split::val);
    if (train_set.empty()) throw std::invalid_argument("train: dataset has no training samples");

    TrainResult result;
    result.params = model::init_model(cfg.backbone, data.n_classes(), cfg.seed);
    ParameterSet& params = result.params;
    AdamState adam;
    LambdaScheduler scheduler(cfg.scheduler);
    const double lr_min = cfg.learning_rate * cfg.lr_min_ratio;
    const bool physics_on = !cfg.physics_free && !cfg.disable_physics;
    const LossWeights aux{0.0, cfg.physics_free || cfg.disable_boundary ? 0.0 : cfg.lambda_b,
                          cfg.physics_free || cfg.disable_temporal ? 0.0 : cfg.lambda_t};

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.learning_rate =
            cosine_lr(static_cast<double>(epoch - 1), static_cast<double>(cfg.epochs), cfg.learning_rate, lr_min);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng(derive_seed(cfg.seed, {0x5348, epoch})).shuffle(order.begin(), order.end());

        std::size_t correct = 0, batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            BatchInputs batch;
            for (std::size_t k = start; k < end; ++k) {
                const sim::LoadedSample& s = *train_set[order[k]];
                auto pair = make_augmented_pair(s.image, data.image_size,
                                                derive_seed(cfg.seed, {0x4147, epoch, s.index}), cfg.augment);
                batch.view1.push_back(std::move(pair.view1));
                if (!cfg.physics_free) batch.view2.push_back(std::move(pair.view2));
                batch.labels.push_back(s.label);
            }
            try {
                Tape tape;
                const Bindings bound = tape.bind(params);
                const LossTerms terms = loss_terms(tape, bound, cfg, batch);
                LossWeights w = aux;
                if (physics_on) w.physics = scheduler.step(terms.cls.item());
                auto [total, b] = named("total", [&] { return total_loss(terms, w); });
                const GradientMap grads = named("gradient", [&] { return backward(total); });
                adamw_step(params, grads, adam, rec.learning_rate, cfg.weight_decay);
                for (const auto& [name, p] : params) {
                    for (double v : p.values) {
                        if (!std::isfinite(v)) throw NonFiniteLoss("update", "parameter '" + name + "' is not finite");
                    }
                }
                const auto logits = terms.logits.values();
                const std::size_t m = data.n_classes();
                for (std::size_t n = 0; n < batch.labels.size(); ++n) {
                    if (argmax(logits.subspan(n * m, m)) == batch.labels[n]) ++correct;
                }
                result.steps.push_back(b);
                rec.mean.l_cls += b.l_cls;
                rec.mean.l_physics += b.l_physics;
                rec.mean.l_boundary += b.l_boundary;
                rec.mean.l_temporal += b.l_temporal;
                rec.mean.lambda_p += b.lambda_p;
                rec.mean.lambda_b += b.lambda_b;
                rec.mean.lambda_t += b.lambda_t;
                rec.mean.total += b.total;
            } catch (const NonFiniteLoss& e) {
                throw TrainingDiverged(epoch, batches, e.loss_name, e.what());
            }
        }
        const double nb = static_cast<double>(batches);
        for (double* v : {&rec.mean.l_cls, &rec.mean.l_physics, &rec.mean.l_boundary, &rec.mean.l_temporal,
                          &rec.mean.lambda_p, &rec.mean.lambda_b, &rec.mean.lambda_t, &rec.mean.total}) {
            *v /= nb;
        }
        rec.lambda_p_end = physics_on ? scheduler.current() : 0.0;
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
        if (!val_set.empty()) {
            std::vector<const std::vector<double>*> images;
            for (const auto* s : val_set) images.push_back(&s->image);
            const auto preds = predict(params, cfg.backbone, images, cfg.eval_batch_size);
            const auto phys = model::expose_physical_params(params);
            std::size_t ok = 0;
            double residual = 0.0;
            std::size_t points = 0;
            for (std::size_t k = 0; k < preds.size(); ++k) {
                if (preds[k].label == val_set[k]->label) ++ok;
                const auto r = grid::pde_residual(preds[k].u, preds[k].dudt, phys.D, phys.rho, phys.K);
                for (double v : r.values()) residual += std::abs(v);
                points += r.size();
            }
            rec.val_accuracy = static_cast<double>(ok) / static_cast<double>(preds.size());
            rec.val_mean_abs_residual = residual / static_cast<double>(points);
        }
        result.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec, params);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

std::vector<Prediction> predict(const ParameterSet& params, const model::BackboneConfig& backbone,
                                const std::vector<const std::vector<double>*>& images, std::size_t batch_size) {
    if (batch_size == 0) throw std::invalid_argument("predict: batch_size must be >= 1");
    std::vector<Prediction> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += batch_size) {
        const std::size_t end = std::min(images.size(), start + batch_size);
        Tape tape;
        const Bindings b = constants(tape, params);
        const std::vector<const std::vector<double>*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                                            images.begin() + static_cast<std::ptrdiff_t>(end));
        const auto fwd = model::forward(backbone, b, model::image_batch(tape, chunk, backbone.input_size));
        const auto logits = fwd.logits.values();
        const std::size_t m = fwd.logits.shape()[1];
        for (std::size_t n = 0; n < chunk.size(); ++n) {
            Prediction p;
            const auto row = logits.subspan(n * m, m);
            p.logits.assign(row.begin(), row.end());
            p.label = argmax(row);
            p.u = slice(fwd.u, n);
            p.dudt = slice(fwd.dudt, n);
            p.u_gate = slice(fwd.u_gate, n);
            out.push_back(std::move(p));
        }
    }
    return out;
}

PhysicalEstimate finetune_physical(const ParameterSet& params, const std::vector<const Prediction*>& preds,
                                   std::size_t steps, double lr) {
    if (preds.empty()) throw std::invalid_argument("finetune_physical: no predictions");
    const std::size_t rows = preds.front()->u_gate.rows(), cols = preds.front()->u_gate.cols();
    std::vector<double> gate, dudt;
    for (const auto* p : preds) {
        gate.insert(gate.end(), p->u_gate.values().begin(), p->u_gate.values().end());
        dudt.insert(dudt.end(), p->dudt.values().begin(), p->dudt.values().end());
    }
    const Shape shape{preds.size(), 1, rows, cols};
    ParameterSet w;
    for (const char* name : {"physics.w_D", "physics.w_rho"}) w[name] = params.at(name);
    const ParamTensor wK = params.at("physics.w_K");

    auto build = [&](Tape& tape, const Bindings& b) {
        const Tensor K = softplus(tape.constant(wK.shape, wK.values));
        const Tensor u = mul(K, tape.constant(shape, gate));
        return physics_loss(u, tape.constant(shape, dudt), softplus(b.at("physics.w_D")),
                            softplus(b.at("physics.w_rho")), K);
    };
    AdamState adam;
    for (std::size_t s = 0; s < steps; ++s) {
        Tape tape;
        const Tensor loss = build(tape, tape.bind(w));
        adamw_step(w, backward(loss), adam, lr, 0.0);
    }
    Tape tape;
    const Tensor loss = build(tape, constants(tape, w));
    w["physics.w_K"] = wK;
    const auto phys = model::expose_physical_params(w);
    return {phys.D, phys.rho, phys.K, loss.item()};
}

void classification_metrics(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t n_classes,
                            MetricsReport& out) {
    if (truth.size() != predicted.size()) throw std::invalid_argument("classification_metrics: length mismatch");
    out.n = truth.size();
    out.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
    std::size_t correct = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const auto t = static_cast<std::size_t>(truth[k]);
        const auto p = static_cast<std::size_t>(predicted[k]);
        if (t >= n_classes || p >= n_classes) throw std::out_of_range("classification_metrics: label out of range");
        ++out.confusion[t][p];
        if (t == p) ++correct;
    }
    out.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
    double f1_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::size_t fp = 0, fn = 0;
        for (std::size_t o = 0; o < n_classes; ++o) {
            if (o == c) continue;
            fp += out.confusion[o][c];
            fn += out.confusion[c][o];
        }
        const std::size_t tp = out.confusion[c][c];
        const std::size_t denom = 2 * tp + fp + fn;
        if (denom == 0) continue;
        f1_sum += 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
        ++counted;
    }
    out.macro_f1 = counted ? f1_sum / static_cast<double>(counted) : 0.0;
}

MetricsReport evaluate(const ParameterSet& params, const model::BackboneConfig& backbone,
                       const std::vector<const sim::LoadedSample*>& samples,
                       const std::vector<std::string>& class_names, const EvaluateOptions& opts) {
    if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
    std::vector<const std::vector<double>*> images;
    for (const auto* s : samples) images.push_back(&s->image);
    const auto preds = predict(params, backbone, images, opts.batch_size);

    MetricsReport r;
    std::vector<int> truth, predicted;
    for (std::size_t k = 0; k < samples.size(); ++k) {
        truth.push_back(samples[k]->label);
        predicted.push_back(preds[k].label);
    }
    classification_metrics(truth, predicted, class_names.size(), r);
    r.physical = model::expose_physical_params(params);

    double sum = 0.0, sum_sq = 0.0, u_err = 0.0;
    std::size_t points = 0, u_points = 0;
    bool u_comparable = true;
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const auto res = grid::pde_residual(preds[k].u, preds[k].dudt, r.physical.D, r.physical.rho, r.physical.K);
        for (double v : res.values()) {
            sum += std::abs(v);
            sum_sq += v * v;
        }
        points += res.size();
        const auto& truth_u = samples[k]->u_true;
        if (truth_u.rows() != preds[k].u.rows() || truth_u.cols() != preds[k].u.cols()) {
            u_comparable = false;
            continue;
        }
        for (std::size_t q = 0; q < truth_u.size(); ++q) {
            const double d = preds[k].u.values()[q] - truth_u.values()[q];
            u_err += d * d;
        }
        u_points += truth_u.size();
    }
    const double np = static_cast<double>(points);
    r.residual_mean = sum / np;
    r.residual_sd = std::sqrt(std::max(0.0, sum_sq / np - r.residual_mean * r.residual_mean));
    r.u_mse = u_comparable && u_points ? u_err / static_cast<double>(u_points) : std::nan("");

    if (opts.per_class_finetune || opts.per_sample_finetune) {
        for (std::size_t c = 0; c < class_names.size(); ++c) {
            ClassStats cs;
            cs.name = class_names[c];
            std::vector<const Prediction*> members;
            for (std::size_t k = 0; k < samples.size(); ++k) {
                if (samples[k]->label == static_cast<int>(c)) members.push_back(&preds[k]);
            }
            cs.support = members.size();
            if (!members.empty() && opts.per_class_finetune) {
                cs.pooled = finetune_physical(params, members, opts.finetune_steps, opts.finetune_lr);
            }
            if (opts.per_sample_finetune) {
                for (const auto* p : members) {
                    cs.per_sample.push_back(finetune_physical(params, {p}, opts.finetune_steps, opts.finetune_lr));
                }
            }
            r.per_class.push_back(std::move(cs));
        }
    }
    return r;
}

double mean_abs_residual(const ParameterSet& params, const model::BackboneConfig& backbone,
                         const std::vector<const sim::LoadedSample*>& samples, std::size_t batch_size) {
    if (samples.empty()) throw std::invalid_argument("mean_abs_residual: no samples");
    std::vector<const std::vector<double>*> images;
    for (const auto* s : samples) images.push_back(&s->image);
    const auto preds = predict(params, backbone, images, batch_size);
    const auto phys = model::expose_physical_params(params);
    double sum = 0.0;
    std::size_t points = 0;
    for (const auto& p : preds) {
        const auto r = grid::pde_residual(p.u, p.dudt, phys.D, phys.rho, phys.K);
        for (double v : r.values()) sum += std::abs(v);
        points += r.size();
    }
    return sum / static_cast<double>(points);
}

json to_json(const MetricsReport& r) {
    auto estimate = [](const PhysicalEstimate& e) {
        return json{{"D", e.D}, {"rho", e.rho}, {"K", e.K}, {"residual_loss", e.residual_loss}};
    };
    json per_class = json::array();
    for (const auto& c : r.per_class) {
        json samples = json::array();
        for (const auto& e : c.per_sample) samples.push_back(estimate(e));
        per_class.push_back({{"name", c.name}, {"support", c.support}, {"pooled", estimate(c.pooled)},
                             {"per_sample", samples}});
    }
    json j{{"n", r.n},
           {"accuracy", r.accuracy},
           {"macro_f1", r.macro_f1},
           {"confusion", r.confusion},
           {"residual_mean_abs", r.residual_mean},
           {"residual_sd_abs", r.residual_sd},
           {"D", r.physical.D},
           {"rho", r.physical.rho},
           {"K", r.physical.K},
           {"u_mse", std::isfinite(r.u_mse) ? json(r.u_mse) : json(nullptr)}};
    if (!r.per_class.empty()) j["per_class"] = per_class;
    return j;
}

}  // namespace physnet::train
