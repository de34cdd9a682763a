#include "physnet/training.hpp"

#include "physnet/grid.hpp"
#include "physnet/harness.hpp"
#include "physnet/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace physnet;
using namespace physnet::ad;
using train::LambdaMode;

namespace {

ParamTensor random_param(Shape shape, std::uint64_t seed, double lo, double hi) {
    Rng rng(seed);
    ParamTensor p{std::move(shape), {}};
    p.values.resize(numel(p.shape));
    for (double& v : p.values) v = rng.uniform(lo, hi);
    return p;
}

Tensor constant(Tape& t, const ParamTensor& p) { return t.constant(p.shape, p.values); }

grid::GridField slice(const ParamTensor& p, std::size_t n, double h = 1.0) {
    const std::size_t H = p.shape[2], W = p.shape[3];
    return grid::GridField(H, W, h, std::vector<double>(p.values.begin() + n * H * W, p.values.begin() + (n + 1) * H * W));
}

bool same_bits(const ParameterSet& a, const ParameterSet& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, p] : a) {
        if (p.values != b.at(name).values) return false;
    }
    return true;
}

// Small corpus shared by the training-loop tests.
class TinyCorpus : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = std::filesystem::temp_directory_path() / "physnet_test_train_corpus";
        std::filesystem::remove_all(dir_);
        sim::GeneratorConfig g;
        g.sim_size = 32;
        g.t_min = 30;
        g.t_max = 60;
        g.tap_size = 4;
        g.render.output_size = 16;
        sim::generate_dataset(sim::default_profiles(), 10, 3, dir_, g);
        data_ = new sim::Dataset(sim::load_dataset(dir_));
    }
    static void TearDownTestSuite() {
        delete data_;
        std::filesystem::remove_all(dir_);
    }

    static train::TrainConfig config(std::size_t epochs) {
        train::TrainConfig c;
        c.backbone = harness::tiny_backbone();
        c.epochs = epochs;
        c.batch_size = 8;
        c.learning_rate = 2e-3;
        c.eval_batch_size = 16;
        return c;
    }

    static inline std::filesystem::path dir_;
    static inline sim::Dataset* data_ = nullptr;
};

}  // namespace

TEST(PhysicsLoss, ZeroOnConsistentInputs) {
    Tape t;
    const auto D = t.scalar(0.3), rho = t.scalar(0.7), K = t.scalar(2.0);
    const std::vector<double> zeros(2 * 16, 0.0);
    EXPECT_EQ(train::physics_loss(t.constant({2, 1, 4, 4}, zeros), t.constant({2, 1, 4, 4}, zeros), D, rho, K).item(), 0.0);

    const double c = 0.5;
    const double growth = 0.7 * (c * (-(c / 2.0) + 1.0));
    EXPECT_EQ(train::physics_loss(t.constant({1, 1, 5, 5}, std::vector<double>(25, c)),
                                  t.constant({1, 1, 5, 5}, std::vector<double>(25, growth)), D, rho, K)
                  .item(),
              0.0);
}

TEST(PhysicsLoss, MatchesResidualOracle) {
    const auto u = random_param({3, 1, 6, 5}, 1, 0, 1.5), dudt = random_param({3, 1, 6, 5}, 2, -1, 1);
    Tape t;
    const double l = train::physics_loss(constant(t, u), constant(t, dudt), t.scalar(0.4), t.scalar(0.9), t.scalar(1.7)).item();
    double acc = 0.0;
    for (std::size_t n = 0; n < 3; ++n) {
        const auto res = grid::pde_residual(slice(u, n), slice(dudt, n), 0.4, 0.9, 1.7);
        for (double r : res.values()) acc += r * r;
    }
    acc /= 90.0;
    EXPECT_NEAR(l, acc, 1e-12 * acc);
    EXPECT_GE(l, 0.0);
}

TEST(BoundaryLoss, UniformIsZeroAndOracle) {
    Tape t;
    EXPECT_EQ(train::boundary_loss(t.constant({2, 1, 5, 5}, std::vector<double>(50, 0.4)), 0.8).item(), 0.0);

    const auto u = random_param({2, 1, 7, 7}, 3, 0, 1);
    const double l = train::boundary_loss(constant(t, u), 0.8).item();
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t n = 0; n < 2; ++n) {
        const auto f = slice(u, n);
        const auto mask = grid::detect_boundary(f, 0.8);
        const auto lap = grid::laplacian_5pt(f);
        for (std::size_t k = 0; k < f.size(); ++k) {
            if (mask.mask[k]) {
                acc += lap.values()[k] * lap.values()[k];
                ++count;
            }
        }
    }
    ASSERT_GT(count, 0u);
    EXPECT_NEAR(l, acc / static_cast<double>(count), 1e-12 * l);
}

TEST(BoundaryLoss, GradientChecks) {
    const auto r = grad_check([](Tape&, const auto& b) { return train::boundary_loss(b.at("u"), 0.75); },
                              {{"u", random_param({2, 1, 5, 5}, 4, 0, 1)}});
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(TemporalLoss, ZeroOnConsistentTripleAndOracle) {
    Tape t;
    const std::vector<double> u1{0.25, 0.5, 0.125, 1.0}, d{0.5, -0.25, 1.0, 0.0};
    std::vector<double> u2(4);
    for (int k = 0; k < 4; ++k) u2[k] = u1[k] + 0.5 * d[k];
    EXPECT_EQ(train::temporal_loss(t.constant({1, 1, 2, 2}, u1), t.constant({1, 1, 2, 2}, d), t.constant({1, 1, 2, 2}, u2), 0.5).item(),
              0.0);

    const auto a = random_param({2, 1, 3, 3}, 5, 0, 1), b = random_param({2, 1, 3, 3}, 6, -1, 1),
               c = random_param({2, 1, 3, 3}, 7, 0, 1);
    double acc = 0.0;
    for (std::size_t k = 0; k < 18; ++k) {
        const double r = c.values[k] - a.values[k] - 0.3 * b.values[k];
        acc += r * r;
    }
    EXPECT_NEAR(train::temporal_loss(constant(t, a), constant(t, b), constant(t, c), 0.3).item(), acc / 18.0, 1e-14);
}

TEST(TotalLoss, WeightedSumMatchesBreakdown) {
    Tape t;
    train::LossTerms terms;
    terms.cls = t.scalar(1.25);
    terms.physics = t.scalar(0.5);
    terms.boundary = t.scalar(2.0);
    terms.temporal = t.scalar(4.0);
    const auto [total, br] = train::total_loss(terms, {0.1, 0.005, 0.01});
    EXPECT_EQ(total.item(), br.total);
    EXPECT_NEAR(br.total, 1.25 + 0.05 + 0.01 + 0.04, 1e-15);
    EXPECT_EQ(br.l_cls, 1.25);
    EXPECT_EQ(br.lambda_p, 0.1);
    const auto [zero, zb] = train::total_loss(terms, {});
    EXPECT_EQ(zero.item(), 1.25);
    EXPECT_EQ(zb.total, 1.25);
}

TEST(Scheduler, FormulaExamples) {
    train::SchedulerConfig cfg;
    train::EmaTracker ema;
    ema.update(0.8);
    EXPECT_EQ(ema.value, 0.8);
    EXPECT_NEAR(train::adaptive_lambda(ema, 0.8, cfg), 0.01, 1e-10);
    EXPECT_NEAR(train::adaptive_lambda(ema, 0.4, cfg), 0.01 * std::exp(0.5), 1e-9);
    EXPECT_EQ(train::adaptive_lambda(ema, 1e-6, cfg), cfg.lambda_max);

    cfg.mode = LambdaMode::literal;
    EXPECT_NEAR(train::adaptive_lambda(ema, 0.8, cfg), 0.006065, 1e-6);
    EXPECT_NEAR(train::adaptive_lambda(ema, 0.8, cfg), 0.01 * std::exp(-0.5), 1e-15);

    cfg.mode = LambdaMode::fixed;
    EXPECT_EQ(train::adaptive_lambda(ema, 0.1, cfg), 0.05);

    ema.update(0.0);
    EXPECT_NEAR(ema.value, 0.999 * 0.8, 1e-15);
}

TEST(Scheduler, AdaptiveNeverDecreasesAndStaysCapped) {
    train::LambdaScheduler s({});
    Rng rng(8);
    double prev = 0.0, loss = 1.4;
    for (int k = 0; k < 3000; ++k) {
        loss = std::max(0.01, loss * (1.0 - 0.002) + rng.uniform(-0.05, 0.05));
        const double l = s.step(loss);
        ASSERT_GE(l, prev);
        ASSERT_LE(l, 0.1);
        prev = l;
    }
    EXPECT_GT(prev, 0.01);
}

TEST(Scheduler, FirstStepAndOtherModes) {
    train::LambdaScheduler a({});
    EXPECT_NEAR(a.step(1.3), 0.01, 1e-10);
    train::SchedulerConfig lit;
    lit.mode = LambdaMode::literal;
    EXPECT_NEAR(train::LambdaScheduler(lit).step(1.3), 0.006065, 1e-6);
    train::SchedulerConfig fixed;
    fixed.mode = LambdaMode::fixed;
    fixed.fixed_lambda = 0.03;
    train::LambdaScheduler f(fixed);
    for (double l : {2.0, 1.0, 0.1}) EXPECT_EQ(f.step(l), 0.03);
    EXPECT_EQ(train::lambda_mode_from_string(train::to_string(LambdaMode::literal)), LambdaMode::literal);
    EXPECT_THROW(train::lambda_mode_from_string("eq21"), std::invalid_argument);
}

TEST(AdamW, ZeroGradientAndDecay) {
    ParameterSet p{{"w", ParamTensor{{2}, {1.5, -2.0}}}};
    train::AdamState st;
    const GradientMap zero{{"w", ParamTensor{{2}, {0.0, 0.0}}}};
    train::adamw_step(p, zero, st, 0.01, 0.0);
    EXPECT_EQ(p.at("w").values, (std::vector<double>{1.5, -2.0}));
    train::adamw_step(p, zero, st, 0.01, 0.1);
    EXPECT_DOUBLE_EQ(p.at("w").values[0], 1.5 * (1.0 - 0.001));
    EXPECT_DOUBLE_EQ(p.at("w").values[1], -2.0 * (1.0 - 0.001));
}

TEST(AdamW, ConstantGradientStepApproachesLr) {
    ParameterSet p{{"w", ParamTensor{{1}, {0.0}}}};
    train::AdamState st;
    double last = 0.0;
    for (int k = 0; k < 500; ++k) {
        const double before = p.at("w").values[0];
        train::adamw_step(p, {{"w", ParamTensor{{1}, {0.3}}}}, st, 1e-3, 0.0);
        last = before - p.at("w").values[0];
    }
    EXPECT_NEAR(last, 1e-3, 1e-9);
    EXPECT_EQ(st.step, 500u);
}

TEST(AdamW, ConvergesOnQuadratic) {
    // f(w) = (w - 1)^2 from w = 0.
    ParameterSet p{{"w", ParamTensor{{1}, {0.0}}}};
    train::AdamState st;
    int steps = 0;
    for (; steps < 2000; ++steps) {
        const double w = p.at("w").values[0];
        if (std::abs(w - 1.0) < 1e-6) break;
        train::adamw_step(p, {{"w", ParamTensor{{1}, {2.0 * (w - 1.0)}}}}, st, 0.01, 0.0);
    }
    EXPECT_NEAR(p.at("w").values[0], 1.0, 1e-6);
    EXPECT_LE(steps, 2000);
}

TEST(CosineLr, Examples) {
    EXPECT_EQ(train::cosine_lr(0, 100, 2e-4, 2e-6), 2e-4);
    EXPECT_NEAR(train::cosine_lr(100, 100, 2e-4, 2e-6), 2e-6, 1e-20);
    EXPECT_NEAR(train::cosine_lr(50, 100, 2e-4, 2e-6), (2e-4 + 2e-6) / 2.0, 1e-18);
    double prev = 1.0;
    for (int e = 0; e <= 100; ++e) {
        const double lr = train::cosine_lr(e, 100, 2e-4, 2e-6);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
}

TEST(Augment, IdentityTransforms) {
    const auto img = random_param({8, 8}, 9, 0, 1).values;
    const auto same = train::apply_geometric(img, 8, {});
    for (std::size_t k = 0; k < img.size(); ++k) EXPECT_NEAR(same[k], img[k], 1e-15);
    const auto twice = train::apply_geometric(train::apply_geometric(img, 8, {0.0, true}), 8, {0.0, true});
    EXPECT_EQ(twice, img);
    const auto flipped = train::apply_geometric(img, 8, {0.0, true});
    EXPECT_EQ(flipped[0], img[7]);
    EXPECT_EQ(train::apply_photometric(img, {}), img);
}

TEST(Augment, QuarterTurnsComposeToIdentity) {
    const auto img = random_param({9, 9}, 10, 0, 1).values;
    auto r = img;
    for (int k = 0; k < 4; ++k) r = train::apply_geometric(r, 9, {90.0, false});
    for (std::size_t k = 0; k < img.size(); ++k) EXPECT_NEAR(r[k], img[k], 1e-9);
}

TEST(Augment, SharedGeometryIndependentJitter) {
    const auto img = random_param({12, 12}, 11, 0, 1).values;
    const auto a = train::make_augmented_pair(img, 12, 5), b = train::make_augmented_pair(img, 12, 5);
    EXPECT_EQ(a.view1, b.view1);
    EXPECT_EQ(a.view2, b.view2);
    EXPECT_LE(std::abs(a.geometric.rotation_deg), 15.0);
    for (const auto& ph : a.photometric) {
        EXPECT_GE(ph.brightness, 0.9);
        EXPECT_LE(ph.brightness, 1.1);
        EXPECT_GE(ph.contrast, 0.9);
        EXPECT_LE(ph.contrast, 1.1);
    }
    EXPECT_NE(a.view1, a.view2);
    const auto base = train::apply_geometric(img, 12, a.geometric);
    EXPECT_EQ(a.view1, train::apply_photometric(base, a.photometric[0]));
    EXPECT_EQ(a.view2, train::apply_photometric(base, a.photometric[1]));

    train::AugmentOptions off;
    off.jitter = false;
    const auto c = train::make_augmented_pair(img, 12, 6, off);
    EXPECT_EQ(c.view1, c.view2);
    for (double v : a.view1) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Config, JsonRoundTripAndStrictness) {
    train::TrainConfig c;
    c.epochs = 7;
    c.scheduler.mode = LambdaMode::fixed;
    c.augment.jitter = false;
    const auto back = train::train_config_from_json(train::to_json(c));
    EXPECT_EQ(train::to_json(back), train::to_json(c));
    EXPECT_EQ(train::config_hash(back), train::config_hash(c));
    EXPECT_EQ(train::config_hash(c).size(), 16u);
    EXPECT_NE(train::config_hash(c), train::config_hash(train::TrainConfig{}));

    EXPECT_THROW(train::train_config_from_json({{"epoch", 3}}), std::invalid_argument);
    EXPECT_THROW(train::train_config_from_json({{"scheduler", {{"mode", "eq21"}}}}), std::invalid_argument);
    EXPECT_THROW(train::train_config_from_json({{"batch_size", 0}}), std::invalid_argument);

    const auto m = train::merge_config(c, {{"seed", 9}, {"scheduler", {{"fixed_lambda", 0.02}}}});
    EXPECT_EQ(m.seed, 9u);
    EXPECT_EQ(m.epochs, 7u);
    EXPECT_EQ(m.scheduler.mode, LambdaMode::fixed);
    EXPECT_EQ(m.scheduler.fixed_lambda, 0.02);
}

TEST(Metrics, ClassificationExamples) {
    train::MetricsReport r;
    train::classification_metrics({0, 1, 2, 3}, {0, 1, 2, 3}, 4, r);
    EXPECT_EQ(r.accuracy, 1.0);
    EXPECT_EQ(r.macro_f1, 1.0);

    train::MetricsReport q;
    train::classification_metrics({0, 0, 1, 1}, {0, 1, 1, 1}, 2, q);
    EXPECT_EQ(q.accuracy, 0.75);
    EXPECT_EQ(q.confusion[0][1], 1u);
    EXPECT_EQ(q.confusion[1][1], 2u);
    // F1: class 0 = 2/3, class 1 = 0.8.
    EXPECT_NEAR(q.macro_f1, (2.0 / 3.0 + 0.8) / 2.0, 1e-15);
}

TEST(Finetune, RecoversParametersOfConsistentField) {
    // Predictions generated from a known (D, rho, K): the fit should reach a tiny residual.
    const double D = 0.4, rho = 0.3, K = 1.2;
    std::vector<train::Prediction> preds(2);
    Rng rng(12);
    for (auto& p : preds) {
        grid::GridField gate(6, 6);
        for (double& v : gate.values()) v = rng.uniform(0.2, 0.8);
        grid::GridField u = gate;
        for (double& v : u.values()) v *= K;
        p.u_gate = gate;
        p.u = u;
        p.dudt = grid::fisher_kpp_rhs(u, D, rho, K);
    }
    auto params = model::init_model(harness::tiny_backbone(), 4, 1);
    params["physics.w_K"].values = {std::log(std::expm1(K))};
    std::vector<const train::Prediction*> ptrs{&preds[0], &preds[1]};
    const auto est = train::finetune_physical(params, ptrs, 3000, 0.05);
    EXPECT_LT(est.residual_loss, 1e-6);
    EXPECT_NEAR(est.D, D, 0.02);
    EXPECT_NEAR(est.rho, rho, 0.02);
    EXPECT_NEAR(est.K, K, 1e-12);
}

TEST_F(TinyCorpus, OneEpochIsDeterministic) {
    const auto cfg = config(1);
    const auto a = train::train(*data_, cfg), b = train::train(*data_, cfg);
    EXPECT_TRUE(same_bits(a.params, b.params));
    ASSERT_EQ(a.epochs.size(), 1u);
    EXPECT_EQ(train::to_csv_row(a.epochs[0]), train::to_csv_row(b.epochs[0]));
    auto other = cfg;
    other.seed = 2;
    EXPECT_FALSE(same_bits(a.params, train::train(*data_, other).params));
}

TEST_F(TinyCorpus, DisabledAuxiliaryLossesMatchPhysicsFreeClassifier) {
    auto off = config(2);
    off.disable_physics = off.disable_boundary = off.disable_temporal = true;
    auto free = config(2);
    free.physics_free = true;
    const auto a = train::train(*data_, off), b = train::train(*data_, free);
    for (const auto& [name, p] : b.params) {
        if (model::is_head_parameter(name) || model::is_physical_parameter(name)) continue;
        ASSERT_EQ(p.values, a.params.at(name).values) << name;
    }
    for (const auto& s : a.steps) {
        EXPECT_EQ(s.lambda_p, 0.0);
        EXPECT_EQ(s.lambda_b, 0.0);
        EXPECT_EQ(s.lambda_t, 0.0);
        EXPECT_EQ(s.total, s.l_cls);
    }
}

TEST_F(TinyCorpus, LogsAndAdaptiveLambdaIsMonotone) {
    const auto cfg = config(4);
    std::size_t calls = 0;
    const auto r = train::train(*data_, cfg, [&](const train::EpochRecord& rec, const ParameterSet&) {
        EXPECT_EQ(rec.epoch, ++calls);
    });
    EXPECT_EQ(calls, 4u);
    double prev = 0.0;
    for (const auto& s : r.steps) {
        EXPECT_GE(s.lambda_p, prev);
        prev = s.lambda_p;
    }
    EXPECT_EQ(r.epochs[0].learning_rate, cfg.learning_rate);
    const auto j = train::to_json(r.epochs[0]);
    for (const char* key : {"epoch", "l_cls", "l_physics", "l_boundary", "l_temporal", "lambda_p", "lr",
                            "train_accuracy", "val_accuracy"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    const std::string header = train::csv_header(), row = train::to_csv_row(r.epochs[0]);
    EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
}

TEST_F(TinyCorpus, PhysicsLossFallsOverTraining) {
    const auto r = train::train(*data_, config(30));
    EXPECT_LT(r.epochs.back().mean.l_physics, r.epochs.front().mean.l_physics);
}

TEST_F(TinyCorpus, HugeLearningRateAbortsWithContext) {
    auto cfg = config(3);
    cfg.learning_rate = 1e30;
    try {
        train::train(*data_, cfg);
        FAIL() << "expected divergence";
    } catch (const train::TrainingDiverged& e) {
        EXPECT_GE(e.epoch, 1u);
        EXPECT_FALSE(e.loss_name.empty());
    }
}

TEST_F(TinyCorpus, EvaluateReportsConsistentMetrics) {
    const auto r = train::train(*data_, config(2));
    const auto test = data_->split(sim::Split::test);
    train::EvaluateOptions opts;
    opts.per_class_finetune = true;
    opts.finetune_steps = 20;
    const auto m = train::evaluate(r.params, config(1).backbone, test, data_->class_names, opts);
    EXPECT_EQ(m.n, test.size());
    std::size_t total = 0, diag = 0;
    for (std::size_t i = 0; i < m.confusion.size(); ++i) {
        for (std::size_t j = 0; j < m.confusion.size(); ++j) total += m.confusion[i][j];
        diag += m.confusion[i][i];
    }
    EXPECT_EQ(total, test.size());
    EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(diag) / static_cast<double>(total));
    EXPECT_GE(m.residual_mean, 0.0);
    EXPECT_EQ(m.per_class.size(), 4u);
    EXPECT_NEAR(m.residual_mean, train::mean_abs_residual(r.params, config(1).backbone, test), 1e-12);
    const auto j = train::to_json(m);
    EXPECT_TRUE(j.contains("residual_mean_abs"));
    EXPECT_TRUE(j.contains("per_class"));
}
