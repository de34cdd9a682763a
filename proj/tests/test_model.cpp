#include "physnet/model.hpp"

#include "physnet/rng.hpp"
#include "physnet/training.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace physnet;
using namespace physnet::ad;

namespace {

model::BackboneConfig small() {
    model::BackboneConfig c;
    c.input_size = 32;
    c.stages = {{4, 2}, {6, 2}, {8, 2}, {8, 2}};
    c.tap_stage = 3;
    c.head_hidden = 4;
    return c;
}

std::vector<std::vector<double>> random_images(std::size_t n, std::size_t size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> out(n, std::vector<double>(size * size));
    for (auto& img : out) {
        for (double& v : img) v = rng.uniform();
    }
    return out;
}

Tensor batch(Tape& t, const std::vector<std::vector<double>>& imgs, std::size_t size) {
    std::vector<const std::vector<double>*> ptrs;
    for (const auto& i : imgs) ptrs.push_back(&i);
    return model::image_batch(t, ptrs, size);
}

bool all_zero(const ParamTensor& g) {
    for (double v : g.values) {
        if (v != 0.0) return false;
    }
    return true;
}

}  // namespace

TEST(Backbone, ShapesAndValidation) {
    const model::BackboneConfig d;
    EXPECT_EQ(d.tap_size(), 14u);
    EXPECT_EQ(d.spatial_size(4), 7u);
    auto bad = d;
    bad.tap_stage = 4;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = small();
    bad.input_size = 8;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    const auto back = model::backbone_from_json(model::to_json(small()));
    EXPECT_EQ(back.stages.size(), 4u);
    EXPECT_EQ(back.stages[1].channels, 6u);
    EXPECT_EQ(back.tap_stage, 3u);
}

TEST(Init, DeterministicPerSeed) {
    const auto a = model::init_model(small(), 4, 3), b = model::init_model(small(), 4, 3), c = model::init_model(small(), 4, 4);
    ASSERT_EQ(a.size(), b.size());
    bool differs = false;
    for (const auto& [name, p] : a) {
        EXPECT_EQ(p.values, b.at(name).values) << name;
        differs |= p.values != c.at(name).values;
    }
    EXPECT_TRUE(differs);
    EXPECT_THROW(model::init_model(small(), 1, 3), std::invalid_argument);
}

TEST(Physical, SoftplusRangeAtInit) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto v = model::expose_physical_params(model::init_model(small(), 4, seed));
        for (double x : {v.D, v.rho, v.K}) {
            EXPECT_GE(x, 0.3132);
            EXPECT_LE(x, 1.3133);
        }
    }
}

TEST(Physical, KnownValuesAndDerivative) {
    auto p = model::init_model(small(), 4, 1);
    p["physics.w_D"].values = {0.0};
    p["physics.w_rho"].values = {-20.0};
    p["physics.w_K"].values = {30.0};
    const auto v = model::expose_physical_params(p);
    EXPECT_NEAR(v.D, std::log(2.0), 1e-15);
    EXPECT_NEAR(v.rho, 2.06e-9, 1e-11);
    EXPECT_GT(v.rho, 0.0);
    EXPECT_NEAR(v.K, 30.0, 1e-12);

    for (double w : {-3.0, 0.0, 0.7, 4.0}) {
        Tape t;
        const auto b = t.bind({{"w", ParamTensor{{1}, {w}}}});
        EXPECT_NEAR(backward(softplus(b.at("w"))).at("w").values[0], 1.0 / (1.0 + std::exp(-w)), 1e-15);
    }
}

TEST(Forward, OutputShapesAndDensityBounds) {
    const auto cfg = small();
    const auto p = model::init_model(cfg, 4, 2);
    const auto imgs = random_images(3, cfg.input_size, 5);
    Tape t;
    const auto out = model::forward(cfg, t.bind(p), batch(t, imgs, cfg.input_size));
    EXPECT_EQ(out.logits.shape(), (Shape{3, 4}));
    EXPECT_EQ(out.u.shape(), (Shape{3, 1, 4, 4}));
    EXPECT_EQ(out.dudt.shape(), (Shape{3, 1, 4, 4}));
    const double K = out.K.item();
    for (double u : out.u.values()) {
        EXPECT_GT(u, 0.0);
        EXPECT_LT(u, K);
    }
}

TEST(Forward, ZeroHeadsGiveHalfCapacityAndNoChange) {
    const auto cfg = small();
    auto p = model::init_model(cfg, 4, 2);
    for (auto& [name, v] : p) {
        if (model::is_head_parameter(name)) std::fill(v.values.begin(), v.values.end(), 0.0);
    }
    Tape t;
    const auto out = model::forward(cfg, t.bind(p), batch(t, random_images(2, cfg.input_size, 6), cfg.input_size));
    const double K = out.K.item();
    for (double u : out.u.values()) EXPECT_DOUBLE_EQ(u, K / 2.0);
    for (double d : out.dudt.values()) EXPECT_EQ(d, 0.0);
}

TEST(Forward, IdenticalRowsGiveIdenticalOutputs) {
    const auto cfg = small();
    const auto p = model::init_model(cfg, 4, 7);
    auto imgs = random_images(1, cfg.input_size, 8);
    imgs.push_back(imgs[0]);
    Tape t;
    const auto out = model::forward(cfg, t.bind(p), batch(t, imgs, cfg.input_size));
    const auto l = out.logits.values();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(l[k], l[4 + k]);
    const auto u = out.u.values();
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(u[k], u[16 + k]);
}

TEST(Forward, WrongResolutionRejected) {
    const auto cfg = small();
    const auto p = model::init_model(cfg, 4, 7);
    Tape t;
    EXPECT_THROW(model::forward(cfg, t.bind(p), batch(t, random_images(1, 24, 1), 24)), std::invalid_argument);
}

TEST(Forward, ClassifierLossDoesNotReachHeads) {
    const auto cfg = small();
    const auto p = model::init_model(cfg, 4, 9);
    Tape t;
    const auto out = model::forward(cfg, t.bind(p), batch(t, random_images(2, cfg.input_size, 10), cfg.input_size));
    const std::vector<int> labels{0, 2};
    const auto g = backward(softmax_cross_entropy(out.logits, labels));
    for (const auto& [name, v] : g) {
        if (model::is_head_parameter(name) || model::is_physical_parameter(name)) {
            EXPECT_TRUE(all_zero(v)) << name;
        }
    }
    EXPECT_FALSE(all_zero(g.at("stage4.down.weight")));
    EXPECT_FALSE(all_zero(g.at("classifier.weight")));
}

TEST(Forward, PhysicsLossReachesEarlyStagesOnly) {
    const auto cfg = small();
    const auto p = model::init_model(cfg, 4, 11);
    Tape t;
    const auto out = model::forward(cfg, t.bind(p), batch(t, random_images(2, cfg.input_size, 12), cfg.input_size));
    const auto g = backward(train::physics_loss(out.u, out.dudt, out.D, out.rho, out.K));
    for (const char* name : {"stage1.down.weight", "stage2.res.weight", "stage3.down.weight", "u_head.conv3.weight",
                             "dudt_head.conv1.weight", "physics.w_D", "physics.w_rho", "physics.w_K"}) {
        EXPECT_FALSE(all_zero(g.at(name))) << name;
    }
    for (const char* name : {"stage4.down.weight", "stage4.res.weight", "classifier.weight", "classifier.bias"}) {
        EXPECT_TRUE(all_zero(g.at(name))) << name;
    }
}

TEST(Forward, HeadsOnlySkipsLaterStages) {
    const auto cfg = small();
    const auto p = model::init_model(cfg, 4, 13);
    Tape full, partial;
    const auto imgs = random_images(1, cfg.input_size, 14);
    const auto a = model::forward(cfg, full.bind(p), batch(full, imgs, cfg.input_size));
    const auto b = model::forward(cfg, partial.bind(p), batch(partial, imgs, cfg.input_size), {false, true, true});
    EXPECT_FALSE(b.logits.valid());
    EXPECT_LT(partial.size(), full.size());
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(a.u.values()[k], b.u.values()[k]);
}

TEST(Forward, FullModelGradientCheck) {
    model::BackboneConfig cfg;
    cfg.input_size = 16;
    cfg.stages = {{3, 2}, {3, 2}, {3, 2}};
    cfg.tap_stage = 2;
    cfg.head_hidden = 3;
    const auto p = model::init_model(cfg, 4, 15);
    const auto imgs = random_images(2, cfg.input_size, 16);
    const std::vector<int> labels{1, 3};
    const auto r = grad_check(
        [&](Tape& t, const auto& b) {
            const auto out = model::forward(cfg, b, batch(t, imgs, cfg.input_size));
            return add(softmax_cross_entropy(out.logits, labels),
                       train::physics_loss(out.u, out.dudt, out.D, out.rho, out.K));
        },
        p);
    EXPECT_LE(r.max_rel_error, 1e-3) << r.worst_param << "[" << r.worst_index << "]";
}
