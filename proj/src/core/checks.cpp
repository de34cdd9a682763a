#include "physnet/harness.hpp"

#include "physnet/grid.hpp"
#include "physnet/io.hpp"
#include "physnet/rng.hpp"
#include "physnet/simulator.hpp"

#include <cmath>
#include <cstring>

namespace physnet::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace physnet::ad;

namespace {

struct Battery {
    json checks = json::array();
    bool passed = true;

    void add(const std::string& name, bool ok, double observed, double expected, double tolerance,
             const std::string& detail = "") {
        json c{{"name", name},
               {"passed", ok},
               {"observed", observed},
               {"expected", expected},
               {"tolerance", tolerance}};
        if (!detail.empty()) c["detail"] = detail;
        checks.push_back(c);
        passed = passed && ok;
    }
};

ParamTensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
    ParamTensor t{std::move(shape), {}};
    t.values.resize(numel(t.shape));
    for (double& v : t.values) v = rng.uniform(lo, hi);
    return t;
}

/// Values in [lo, hi] that stay at least `gap` away from zero.
ParamTensor away_from_zero(Rng& rng, Shape shape, double lo, double hi, double gap) {
    ParamTensor t = random_tensor(rng, std::move(shape), lo, hi);
    for (double& v : t.values) {
        if (std::abs(v) < gap) v = v < 0 ? -gap : gap;
    }
    return t;
}

struct OpCase {
    const char* name;
    ScalarFunction f;
    ParameterSet params;
};

std::vector<OpCase> op_cases() {
    Rng rng(derive_seed(0xC4EC, {1}));
    std::vector<OpCase> cases;
    cases.push_back({"elementwise",
                     [](Tape&, const std::map<std::string, Tensor>& p) {
                         const Tensor& a = p.at("a");
                         const Tensor& b = p.at("b");
                         const Tensor q = div(mul(a, b), add_scalar(square(p.at("c")), 1.0));
                         return mean(add(sub(q, scale(a, 0.5)), mul(b, p.at("s"))));
                     },
                     {{"a", random_tensor(rng, {2, 3}, -1, 1)},
                      {"b", random_tensor(rng, {2, 3}, -1, 1)},
                      {"c", random_tensor(rng, {2, 3}, -1, 1)},
                      {"s", random_tensor(rng, {1}, -1, 1)}}});
    cases.push_back({"activations",
                     [](Tape&, const std::map<std::string, Tensor>& p) {
                         return sum(add(mul(softplus(p.at("a")), sigmoid(p.at("b"))), square(relu(p.at("c")))));
                     },
                     {{"a", random_tensor(rng, {7}, -3, 3)},
                      {"b", random_tensor(rng, {7}, -3, 3)},
                      {"c", away_from_zero(rng, {7}, -1, 1, 0.1)}}});
    for (int stride : {1, 2}) {
        cases.push_back({stride == 1 ? "conv2d" : "conv2d_stride2",
                         [stride](Tape&, const std::map<std::string, Tensor>& p) {
                             return sum(square(conv2d(p.at("x"), p.at("w"), p.at("b"), stride, 1)));
                         },
                         {{"x", random_tensor(rng, {2, 2, 5, 5}, -1, 1)},
                          {"w", random_tensor(rng, {3, 2, 3, 3}, -1, 1)},
                          {"b", random_tensor(rng, {3}, -1, 1)}}});
    }
    cases.push_back({"stencil_laplacian",
                     [](Tape&, const std::map<std::string, Tensor>& p) {
                         return sum(square(stencil_laplacian(p.at("x"), 0.7)));
                     },
                     {{"x", random_tensor(rng, {2, 1, 5, 6}, -1, 1)}}});
    cases.push_back({"pool_dense",
                     [](Tape&, const std::map<std::string, Tensor>& p) {
                         return sum(square(dense(global_avg_pool(p.at("x")), p.at("w"), p.at("b"))));
                     },
                     {{"x", random_tensor(rng, {2, 3, 4, 4}, -1, 1)},
                      {"w", random_tensor(rng, {2, 3}, -1, 1)},
                      {"b", random_tensor(rng, {2}, -1, 1)}}});
    cases.push_back({"softmax_cross_entropy",
                     [](Tape&, const std::map<std::string, Tensor>& p) {
                         static const int labels[] = {0, 2, 3};
                         return softmax_cross_entropy(p.at("z"), labels);
                     },
                     {{"z", random_tensor(rng, {3, 4}, -2, 2)}}});
    cases.push_back({"physics_loss",
                     [](Tape&, const std::map<std::string, Tensor>& p) {
                         return train::physics_loss(p.at("u"), p.at("dudt"), softplus(p.at("wD")),
                                                    softplus(p.at("wr")), softplus(p.at("wK")));
                     },
                     {{"u", random_tensor(rng, {2, 1, 4, 4}, 0.1, 0.9)},
                      {"dudt", random_tensor(rng, {2, 1, 4, 4}, -0.1, 0.1)},
                      {"wD", random_tensor(rng, {1}, -1, 1)},
                      {"wr", random_tensor(rng, {1}, -1, 1)},
                      {"wK", random_tensor(rng, {1}, -1, 1)}}});
    cases.push_back({"boundary_temporal",
                     [](Tape&, const std::map<std::string, Tensor>& p) {
                         return add(train::boundary_loss(p.at("u"), 0.8),
                                    train::temporal_loss(p.at("u"), p.at("dudt"), p.at("u2"), 1.0));
                     },
                     {{"u", random_tensor(rng, {2, 1, 5, 5}, 0, 1)},
                      {"dudt", random_tensor(rng, {2, 1, 5, 5}, -0.1, 0.1)},
                      {"u2", random_tensor(rng, {2, 1, 5, 5}, 0, 1)}}});
    return cases;
}

grid::GridField candidate_laplacian(const grid::GridField& u, bool fault) {
    grid::GridField l = grid::laplacian_5pt(u);
    if (fault) {
        for (double& v : l.values()) v = -v;
    }
    return l;
}

}  // namespace

model::BackboneConfig tiny_backbone() {
    model::BackboneConfig c;
    c.input_size = 16;
    c.stages = {{4, 2}, {4, 2}, {4, 2}};
    c.tap_stage = 2;
    c.head_hidden = 3;
    return c;
}

json run_check(const json& o) {
    const char* cmd = "check";
    if (!o.is_object()) throw UsageError("check: options must be a JSON object");
    for (const auto& [k, v] : o.items()) {
        if (k != "report" && k != "grad_tol" && k != "model_grad_tol" && k != "inject_fault") {
            throw UsageError(std::string(cmd) + ": unknown option '" + k + "'");
        }
    }
    double grad_tol = 1e-4, model_tol = 1e-3;
    std::string fault = "none";
    try {
        grad_tol = o.value("grad_tol", grad_tol);
        model_tol = o.value("model_grad_tol", model_tol);
        fault = o.value("inject_fault", fault);
    } catch (const json::exception& e) {
        throw UsageError(std::string("check: ") + e.what());
    }
    if (!(grad_tol > 0.0) || !(model_tol > 0.0)) throw UsageError("check: tolerances must be positive");
    if (fault != "none" && fault != "laplacian_sign") {
        throw UsageError("check: unknown fault '" + fault + "' (none, laplacian_sign)");
    }
    const bool lap_fault = fault == "laplacian_sign";
    Battery b;

    // Stencil on a quadratic: lap(x^2 + 2 y^2) = 6 away from the padded edge.
    {
        const double h = 0.5;
        grid::GridField u(12, 12, h);
        for (std::size_t i = 0; i < 12; ++i) {
            for (std::size_t j = 0; j < 12; ++j) {
                const double y = static_cast<double>(i) * h, x = static_cast<double>(j) * h;
                u(i, j) = y * y + 2.0 * x * x;
            }
        }
        const auto lap = candidate_laplacian(u, lap_fault);
        double worst = 0.0;
        for (std::size_t i = 1; i + 1 < 12; ++i) {
            for (std::size_t j = 1; j + 1 < 12; ++j) worst = std::max(worst, std::abs(lap(i, j) - 6.0));
        }
        b.add("stencil_quadratic", worst <= 1e-9, 6.0 + worst, 6.0, 1e-9, "max |lap - 6| over interior");
    }

    // Differentiable stencil against the reference, bit for bit.
    {
        Rng rng(derive_seed(0xC4EC, {2}));
        std::size_t mismatches = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t rows = 3 + static_cast<std::size_t>(rng.uniform_int(0, 12));
            const std::size_t cols = 3 + static_cast<std::size_t>(rng.uniform_int(0, 12));
            const double h = rng.uniform(0.2, 2.0);
            std::vector<double> v(rows * cols);
            for (double& x : v) x = rng.uniform(-1, 1);
            const auto ref = candidate_laplacian(grid::GridField(rows, cols, h, v), lap_fault);
            Tape tape;
            const Tensor l = stencil_laplacian(tape.constant({1, 1, rows, cols}, v), h);
            if (std::memcmp(ref.values().data(), l.values().data(), v.size() * sizeof(double)) != 0) ++mismatches;
        }
        b.add("stencil_equivalence", mismatches == 0, static_cast<double>(mismatches), 0.0, 0.0,
              "fields whose stencil output differs from the reference");
    }

    // Uniform field follows the logistic closed form.
    double logistic_error = 0.0;
    {
        const sim::SimParams p{1.0, 1.0, 1.0, 1e-3, 5000};
        const auto snaps = sim::simulate(grid::GridField(8, 8, 1.0, 0.1), p, p.steps);
        const double t = snaps.back().time;
        const double exact = 0.1 * std::exp(t) / (1.0 + 0.1 * (std::exp(t) - 1.0));
        for (double v : snaps.back().field.values()) logistic_error = std::max(logistic_error, std::abs(v - exact));
        b.add("logistic", logistic_error <= 1e-3, logistic_error, 0.0, 1e-3, "max |u - u_exact| at t = 5");
    }

    // Pure diffusion conserves mass.
    {
        const auto u0 = sim::gaussian_blob(64, 64, 1.0, 30.0, 34.0, 5.0, 0.5);
        const sim::SimParams p{1.0, 0.0, 1.0, 0.2, 1000};
        const auto snaps = sim::simulate(u0, p, p.steps);
        double m0 = 0.0, m1 = 0.0;
        for (double v : u0.values()) m0 += v;
        for (double v : snaps.back().field.values()) m1 += v;
        const double rel = std::abs(m1 - m0) / m0;
        b.add("mass_conservation", rel <= 1e-6, rel, 0.0, 1e-6, "relative mass change over 1000 steps");
    }

    // Travelling-front speed 2 sqrt(D rho).
    double front_error = 0.0;
    for (const auto& [D, rho] : {std::pair{1.0, 1.0}, std::pair{0.25, 1.0}}) {
        const double dx = std::sqrt(D);
        const double c = 2.0 * std::sqrt(D * rho);
        const double dt = 0.1 * dx * dx / (4.0 * D);
        const double horizon = 0.8 * 128.0 * dx / c;
        const auto steps = static_cast<std::size_t>(std::ceil(horizon / dt));
        const auto u0 = sim::gaussian_blob(256, 256, dx, 127.5, 127.5, 3.0 * dx, 1.0);
        const auto snaps = sim::simulate(u0, {D, rho, 1.0, dt, steps}, 40);
        const auto fs = sim::measure_front_speed(snaps, 0.5);
        const double err = fs.measurable ? std::abs(fs.speed - c) / c : 1.0;
        front_error = std::max(front_error, err);
        b.add("front_speed_D" + std::to_string(D).substr(0, 4), fs.measurable && err <= 0.1, fs.speed, c, 0.1 * c,
              fs.measurable ? "" : fs.reason);
    }

    // Loss zero cases.
    {
        Rng rng(derive_seed(0xC4EC, {3}));
        std::vector<double> uv(2 * 36);
        for (double& v : uv) v = rng.uniform(0.05, 0.95);
        std::vector<double> dudt;
        const double D = 0.3, rho = 0.7, K = 1.2;
        for (std::size_t n = 0; n < 2; ++n) {
            const grid::GridField un(6, 6, 1.0, std::vector<double>(uv.begin() + n * 36, uv.begin() + (n + 1) * 36));
            const auto rhs = grid::fisher_kpp_rhs(un, D, rho, K);
            dudt.insert(dudt.end(), rhs.values().begin(), rhs.values().end());
        }
        Tape tape;
        const Shape s{2, 1, 6, 6};
        const double phys = train::physics_loss(tape.constant(s, uv), tape.constant(s, dudt), tape.scalar(D),
                                                tape.scalar(rho), tape.scalar(K))
                                .item();
        b.add("physics_loss_zero", phys == 0.0, phys, 0.0, 0.0, "consistent (u, dudt)");
        const double bnd = train::boundary_loss(tape.constant(s, std::vector<double>(72, 0.4)), 0.8).item();
        b.add("boundary_loss_zero", bnd == 0.0, bnd, 0.0, 0.0, "uniform u");
        std::vector<double> u1(72), d1(72), u2(72);
        for (std::size_t k = 0; k < 72; ++k) {
            u1[k] = static_cast<double>(rng.uniform_int(0, 512)) / 1024.0;
            d1[k] = static_cast<double>(rng.uniform_int(-256, 256)) / 1024.0;
            u2[k] = u1[k] + 0.5 * d1[k];
        }
        const double tmp = train::temporal_loss(tape.constant(s, u1), tape.constant(s, d1), tape.constant(s, u2), 0.5)
                               .item();
        b.add("temporal_loss_zero", tmp == 0.0, tmp, 0.0, 0.0, "u2 = u1 + dt dudt1");
    }

    // Per-op gradient checks.
    double max_grad_error = 0.0;
    for (const auto& c : op_cases()) {
        GradCheckOptions go;
        go.tolerance = grad_tol;
        const auto r = grad_check(c.f, c.params, go);
        max_grad_error = std::max(max_grad_error, r.max_rel_error);
        b.add(std::string("grad_") + c.name, r.passed, r.max_rel_error, 0.0, grad_tol,
              r.worst_param + "[" + std::to_string(r.worst_index) + "]");
    }

    // Whole-model gradient check on a 2-sample batch.
    {
        train::TrainConfig cfg;
        cfg.backbone = tiny_backbone();
        const auto params = model::init_model(cfg.backbone, 4, 11);
        Rng rng(derive_seed(0xC4EC, {4}));
        train::BatchInputs batch;
        for (int n = 0; n < 2; ++n) {
            std::vector<double> img(16 * 16);
            for (double& v : img) v = rng.uniform(0, 1);
            const auto pair = train::make_augmented_pair(img, 16, derive_seed(0xC4EC, {5, static_cast<std::uint64_t>(n)}));
            batch.view1.push_back(pair.view1);
            batch.view2.push_back(pair.view2);
            batch.labels.push_back(n);
        }
        const train::LossWeights w{1.0, 1.0, 1.0};
        auto f = [&](Tape& tape, const std::map<std::string, Tensor>& p) {
            return train::batch_loss(tape, p, cfg, batch, w);
        };
        GradCheckOptions go;
        go.tolerance = model_tol;
        const auto r = grad_check(f, params, go);
        max_grad_error = std::max(max_grad_error, r.max_rel_error);
        b.add("grad_full_model", r.passed, r.max_rel_error, 0.0, model_tol,
              r.worst_param + "[" + std::to_string(r.worst_index) + "] over " + std::to_string(r.checked) +
                  " parameters");
    }

    json result{{"passed", b.passed},
                {"inject_fault", fault},
                {"max_grad_error", max_grad_error},
                {"front_speed_error", front_error},
                {"logistic_error", logistic_error},
                {"checks", b.checks}};
    if (o.contains("report")) {
        const fs::path report = o.at("report").get<std::string>();
        fs::create_directories(report);
        io::write_file(report / "check.json", result.dump(2) + "\n");
    }
    return result;
}

}  // namespace physnet::harness
