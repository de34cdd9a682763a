#include "physnet/simulator.hpp"

#include "physnet/io.hpp"
#include "physnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace physnet::sim {

using nlohmann::json;

void validate(const SimParams& p, double spacing) {
    auto bad = [](const std::string& msg) { throw std::invalid_argument("SimParams: " + msg); };
    if (!(p.D > 0.0) || !std::isfinite(p.D)) bad("D must be > 0");
    if (!(p.rho >= 0.0) || !std::isfinite(p.rho)) bad("rho must be >= 0");
    if (!(p.K > 0.0) || !std::isfinite(p.K)) bad("K must be > 0");
    if (!(p.dt > 0.0) || !std::isfinite(p.dt)) bad("dt must be > 0");
    const double limit = spacing * spacing / (4.0 * p.D);
    if (p.dt > limit) {
        std::ostringstream os;
        os << "CFL violation: dt = " << p.dt << " exceeds spacing^2/(4D) = " << limit;
        bad(os.str());
    }
}

GridField step_ftcs(const GridField& u, const SimParams& p, double* max_clamp) {
    validate(p, u.spacing());
    GridField next = p.rho > 0.0 ? grid::fisher_kpp_rhs(u, p.D, p.rho, p.K) : grid::laplacian_5pt(u);
    auto out = next.values();
    const auto cur = u.values();
    double clamp_excess = 0.0;
    for (std::size_t k = 0; k < out.size(); ++k) {
        const double rate = p.rho > 0.0 ? out[k] : p.D * out[k];
        const double v = cur[k] + p.dt * rate;
        const double c = std::clamp(v, 0.0, p.K);
        clamp_excess = std::max(clamp_excess, std::abs(v - c));
        out[k] = c;
    }
    if (max_clamp) *max_clamp = std::max(*max_clamp, clamp_excess);
    return next;
}

std::vector<Snapshot> simulate(const GridField& initial, const SimParams& p, std::size_t snapshot_every,
                               double* max_clamp) {
    validate(p, initial.spacing());
    initial.require_finite("simulate");
    for (double v : initial.values()) {
        if (v < 0.0 || v > p.K) throw std::invalid_argument("simulate: initial condition outside [0, K]");
    }
    if (snapshot_every == 0) snapshot_every = 1;
    std::vector<Snapshot> snaps{{0.0, initial}};
    GridField u = initial;
    for (std::size_t s = 1; s <= p.steps; ++s) {
        u = step_ftcs(u, p, max_clamp);
        if (s % snapshot_every == 0 || s == p.steps) snaps.push_back({static_cast<double>(s) * p.dt, u});
    }
    return snaps;
}

double level_set_radius(const GridField& u, double level) {
    std::size_t count = 0;
    for (double v : u.values()) count += v > level ? 1 : 0;
    const double area = static_cast<double>(count) * u.spacing() * u.spacing();
    return std::sqrt(area / std::numbers::pi);
}

namespace {

bool touches_edge(const GridField& u, double level) {
    const std::size_t H = u.rows();
    const std::size_t W = u.cols();
    for (std::size_t j = 0; j < W; ++j) {
        if (u(0, j) > level || u(H - 1, j) > level) return true;
    }
    for (std::size_t i = 0; i < H; ++i) {
        if (u(i, 0) > level || u(i, W - 1) > level) return true;
    }
    return false;
}

double fit_slope(const std::vector<double>& t, const std::vector<double>& r, std::size_t begin, std::size_t end) {
    const double n = static_cast<double>(end - begin);
    double mt = 0.0, mr = 0.0;
    for (std::size_t k = begin; k < end; ++k) {
        mt += t[k];
        mr += r[k];
    }
    mt /= n;
    mr /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t k = begin; k < end; ++k) {
        sxy += (t[k] - mt) * (r[k] - mr);
        sxx += (t[k] - mt) * (t[k] - mt);
    }
    return sxx > 0.0 ? sxy / sxx : 0.0;
}

}  // namespace

FrontSpeed measure_front_speed(const std::vector<Snapshot>& snapshots, double level) {
    FrontSpeed out;
    if (!(level > 0.0)) throw std::invalid_argument("measure_front_speed: level must be > 0");
    if (snapshots.size() < 3) {
        out.reason = "need at least 3 snapshots";
        return out;
    }
    const std::size_t first = snapshots.size() / 2;
    std::vector<double> t, r;
    for (std::size_t k = first; k < snapshots.size(); ++k) {
        const GridField& u = snapshots[k].field;
        if (touches_edge(u, level)) {
            out.reason = "front reached the grid edge at t = " + std::to_string(snapshots[k].time);
            return out;
        }
        const double radius = level_set_radius(u, level);
        if (radius == 0.0) {
            out.reason = "no level crossing at t = " + std::to_string(snapshots[k].time);
            return out;
        }
        t.push_back(snapshots[k].time);
        r.push_back(radius);
    }
    const double slope = fit_slope(t, r, 0, t.size());
    if (!(slope > 0.0)) {
        out.reason = "level-set radius is not growing";
        return out;
    }
    if (t.size() >= 4) {
        const std::size_t mid = t.size() / 2;
        const double early = fit_slope(t, r, 0, mid + 1);
        const double late = fit_slope(t, r, mid, t.size());
        if (late < 0.5 * early) {
            out.reason = "sublinear radius growth; no travelling front";
            return out;
        }
    }
    out.measurable = true;
    out.speed = slope;
    return out;
}

GridField gaussian_blob(std::size_t rows, std::size_t cols, double spacing, double center_row, double center_col,
                        double sigma, double amplitude) {
    GridField u(rows, cols, spacing);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const double dy = (static_cast<double>(i) - center_row) * spacing;
            const double dx = (static_cast<double>(j) - center_col) * spacing;
            u(i, j) = amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    }
    return u;
}

std::vector<double> resample(const std::vector<double>& src, std::size_t rows, std::size_t cols, std::size_t out_rows,
                             std::size_t out_cols) {
    if (src.size() != rows * cols || out_rows == 0 || out_cols == 0) {
        throw std::invalid_argument("resample: bad dimensions");
    }
    std::vector<double> out(out_rows * out_cols, 0.0);
    if (out_rows <= rows && out_cols <= cols) {
        // Each output cell averages the source cells it overlaps, weighted
        // by the overlap length along each axis.
        const double sy = static_cast<double>(rows) / static_cast<double>(out_rows);
        const double sx = static_cast<double>(cols) / static_cast<double>(out_cols);
        for (std::size_t oi = 0; oi < out_rows; ++oi) {
            const double y0 = static_cast<double>(oi) * sy;
            const double y1 = y0 + sy;
            for (std::size_t oj = 0; oj < out_cols; ++oj) {
                const double x0 = static_cast<double>(oj) * sx;
                const double x1 = x0 + sx;
                double acc = 0.0;
                for (auto i = static_cast<std::size_t>(y0); i < rows && static_cast<double>(i) < y1; ++i) {
                    const double wy = std::min<double>(y1, static_cast<double>(i + 1)) - std::max<double>(y0, static_cast<double>(i));
                    if (wy <= 0.0) continue;
                    for (auto j = static_cast<std::size_t>(x0); j < cols && static_cast<double>(j) < x1; ++j) {
                        const double wx = std::min<double>(x1, static_cast<double>(j + 1)) - std::max<double>(x0, static_cast<double>(j));
                        if (wx <= 0.0) continue;
                        acc += wy * wx * src[i * cols + j];
                    }
                }
                out[oi * out_cols + oj] = acc / (sy * sx);
            }
        }
        return out;
    }
    for (std::size_t oi = 0; oi < out_rows; ++oi) {
        const double y = std::clamp((static_cast<double>(oi) + 0.5) * static_cast<double>(rows) / static_cast<double>(out_rows) - 0.5,
                                    0.0, static_cast<double>(rows - 1));
        const auto i0 = static_cast<std::size_t>(y);
        const std::size_t i1 = std::min(i0 + 1, rows - 1);
        const double fy = y - static_cast<double>(i0);
        for (std::size_t oj = 0; oj < out_cols; ++oj) {
            const double x = std::clamp((static_cast<double>(oj) + 0.5) * static_cast<double>(cols) / static_cast<double>(out_cols) - 0.5,
                                        0.0, static_cast<double>(cols - 1));
            const auto j0 = static_cast<std::size_t>(x);
            const std::size_t j1 = std::min(j0 + 1, cols - 1);
            const double fx = x - static_cast<double>(j0);
            const double top = (1.0 - fx) * src[i0 * cols + j0] + fx * src[i0 * cols + j1];
            const double bottom = (1.0 - fx) * src[i1 * cols + j0] + fx * src[i1 * cols + j1];
            out[oi * out_cols + oj] = (1.0 - fy) * top + fy * bottom;
        }
    }
    return out;
}

std::vector<double> background_texture(std::size_t rows, std::size_t cols, std::uint64_t seed, double level) {
    Rng rng(derive_seed(seed, {0xB6}));
    constexpr int modes = 4;
    struct Mode {
        double amp, fy, fx, phase;
    };
    std::vector<Mode> m;
    for (int k = 0; k < modes; ++k) {
        const double amp = rng.uniform(0.02, 0.05);
        const auto fy = static_cast<double>(rng.uniform_int(-3, 3));
        const auto fx = static_cast<double>(rng.uniform_int(1, 3));
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        m.push_back({amp, fy, fx, phase});
    }
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        const double y = static_cast<double>(i) / static_cast<double>(rows);
        for (std::size_t j = 0; j < cols; ++j) {
            const double x = static_cast<double>(j) / static_cast<double>(cols);
            double v = level;
            for (const Mode& md : m) v += md.amp * std::cos(2.0 * std::numbers::pi * (md.fy * y + md.fx * x) + md.phase);
            out[i * cols + j] = v;
        }
    }
    return out;
}

Image render_image(const GridField& u, std::uint64_t noise_seed, const RenderOptions& opts) {
    u.require_finite("render_image");
    const std::size_t H = u.rows();
    const std::size_t W = u.cols();
    std::vector<double> intensity = background_texture(H, W, noise_seed, opts.background_level);
    const auto uv = u.values();
    for (std::size_t k = 0; k < intensity.size(); ++k) {
        const double a = std::clamp(uv[k], 0.0, 1.0);
        intensity[k] += (opts.foreground - intensity[k]) * a;
    }
    Image img;
    img.rows = opts.output_size;
    img.cols = opts.output_size;
    img.pixels = resample(intensity, H, W, img.rows, img.cols);
    if (opts.noise_sd > 0.0) {
        Rng rng(derive_seed(noise_seed, {0x40}));
        for (double& p : img.pixels) p += rng.normal(0.0, opts.noise_sd);
    }
    for (double& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
    return img;
}

std::vector<ClassProfile> default_profiles() {
    // D and rho means/sds per class from the reported parameter ordering;
    // K, blob counts and placements are generator choices.
    ClassProfile glioma{"glioma-like", true, 0.150, 0.025, 0.025, 0.004, 1.0, 0.1, 1, 3, {0.45, 0.5, 0.0, 0.22}};
    ClassProfile meningioma{"meningioma-like", true, 0.075, 0.020, 0.012, 0.003, 1.0, 0.1, 1, 1, {0.5, 0.5, 0.33, 0.38}};
    ClassProfile pituitary{"pituitary-like", true, 0.050, 0.012, 0.008, 0.002, 1.0, 0.1, 1, 1, {0.66, 0.5, 0.0, 0.04}};
    ClassProfile none{"no-tumor", false, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0, 0, {}};
    return {glioma, meningioma, pituitary, none};
}

json to_json(const ClassProfile& p) {
    return {{"name", p.name},
            {"has_lesion", p.has_lesion},
            {"D_mean", p.D_mean},
            {"D_sd", p.D_sd},
            {"rho_mean", p.rho_mean},
            {"rho_sd", p.rho_sd},
            {"K_mean", p.K_mean},
            {"K_sd", p.K_sd},
            {"blobs_min", p.blobs_min},
            {"blobs_max", p.blobs_max},
            {"placement",
             {{"center_row", p.placement.center_row},
              {"center_col", p.placement.center_col},
              {"radius_min", p.placement.radius_min},
              {"radius_max", p.placement.radius_max}}},
            {"blob_sigma_min", p.blob_sigma_min},
            {"blob_sigma_max", p.blob_sigma_max},
            {"blob_amplitude_min", p.blob_amplitude_min},
            {"blob_amplitude_max", p.blob_amplitude_max}};
}

ClassProfile profile_from_json(const json& j) {
    ClassProfile p;
    p.name = j.at("name").get<std::string>();
    p.has_lesion = j.value("has_lesion", true);
    p.D_mean = j.value("D_mean", 0.0);
    p.D_sd = j.value("D_sd", 0.0);
    p.rho_mean = j.value("rho_mean", 0.0);
    p.rho_sd = j.value("rho_sd", 0.0);
    p.K_mean = j.value("K_mean", 1.0);
    p.K_sd = j.value("K_sd", 0.0);
    p.blobs_min = j.value("blobs_min", 1);
    p.blobs_max = j.value("blobs_max", 1);
    if (j.contains("placement")) {
        const json& pl = j.at("placement");
        p.placement.center_row = pl.value("center_row", 0.5);
        p.placement.center_col = pl.value("center_col", 0.5);
        p.placement.radius_min = pl.value("radius_min", 0.0);
        p.placement.radius_max = pl.value("radius_max", 0.0);
    }
    p.blob_sigma_min = j.value("blob_sigma_min", p.blob_sigma_min);
    p.blob_sigma_max = j.value("blob_sigma_max", p.blob_sigma_max);
    p.blob_amplitude_min = j.value("blob_amplitude_min", p.blob_amplitude_min);
    p.blob_amplitude_max = j.value("blob_amplitude_max", p.blob_amplitude_max);
    if (p.has_lesion && (!(p.D_mean > 0.0) || !(p.rho_mean > 0.0) || !(p.K_mean > 0.0))) {
        throw std::invalid_argument("profile '" + p.name + "': lesion classes need positive D, rho, K means");
    }
    if (p.blobs_min < 0 || p.blobs_max < p.blobs_min) {
        throw std::invalid_argument("profile '" + p.name + "': bad blob count range");
    }
    return p;
}

json to_json(const GeneratorConfig& c) {
    return {{"sim_size", c.sim_size},
            {"sim_spacing", c.sim_spacing},
            {"t_min", c.t_min},
            {"t_max", c.t_max},
            {"dt_max", c.dt_max},
            {"tap_size", c.tap_size},
            {"image_size", c.render.output_size},
            {"noise_sd", c.render.noise_sd},
            {"foreground", c.render.foreground},
            {"background_level", c.render.background_level}};
}

GeneratorConfig generator_config_from_json(const json& j) {
    static const std::vector<std::string> known{"sim_size", "sim_spacing", "t_min",      "t_max",     "dt_max",
                                                "tap_size", "image_size",  "noise_sd", "foreground", "background_level"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(known.begin(), known.end(), k) == known.end()) {
            throw std::invalid_argument("generator config: unknown key '" + k + "'");
        }
    }
    GeneratorConfig c;
    c.sim_size = j.value("sim_size", c.sim_size);
    c.sim_spacing = j.value("sim_spacing", c.sim_spacing);
    c.t_min = j.value("t_min", c.t_min);
    c.t_max = j.value("t_max", c.t_max);
    c.dt_max = j.value("dt_max", c.dt_max);
    c.tap_size = j.value("tap_size", c.tap_size);
    c.render.output_size = j.value("image_size", c.render.output_size);
    c.render.noise_sd = j.value("noise_sd", c.render.noise_sd);
    c.render.foreground = j.value("foreground", c.render.foreground);
    c.render.background_level = j.value("background_level", c.render.background_level);
    if (c.sim_size < 3 || c.tap_size < 3 || c.render.output_size < 3) {
        throw std::invalid_argument("generator config: grid sizes must be >= 3");
    }
    if (!(c.t_min >= 0.0) || c.t_max < c.t_min) throw std::invalid_argument("generator config: bad time range");
    return c;
}

SyntheticSample generate_sample(const ClassProfile& profile, int label, std::uint64_t seed, std::size_t index,
                                const GeneratorConfig& cfg) {
    Rng rng(derive_seed(seed, {index}));
    const std::size_t n = cfg.sim_size;
    const double dx = cfg.sim_spacing;
    GridField u(n, n, dx);
    SyntheticSample s;
    s.label = label;
    if (profile.has_lesion) {
        GroundTruth& t = s.truth;
        t.has_lesion = true;
        t.D = rng.positive_normal(profile.D_mean, profile.D_sd);
        t.rho = rng.positive_normal(profile.rho_mean, profile.rho_sd);
        t.K = rng.positive_normal(profile.K_mean, profile.K_sd);
        t.sim_time = rng.uniform(cfg.t_min, cfg.t_max);
        t.blobs = static_cast<int>(rng.uniform_int(profile.blobs_min, profile.blobs_max));
        const double extent = static_cast<double>(n);
        for (int b = 0; b < t.blobs; ++b) {
            const double radius = rng.uniform(profile.placement.radius_min, profile.placement.radius_max) * extent;
            const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double ci = profile.placement.center_row * extent + radius * std::sin(angle);
            const double cj = profile.placement.center_col * extent + radius * std::cos(angle);
            const double sigma = rng.uniform(profile.blob_sigma_min, profile.blob_sigma_max);
            const double amp = rng.uniform(profile.blob_amplitude_min, profile.blob_amplitude_max) * t.K;
            const GridField blob = gaussian_blob(n, n, dx, ci, cj, sigma, amp);
            auto uv = u.values();
            const auto bv = blob.values();
            for (std::size_t k = 0; k < uv.size(); ++k) uv[k] = std::min(t.K, uv[k] + bv[k]);
        }
        const double dt_limit = 0.9 * dx * dx / (4.0 * t.D);
        const double dt_target = std::min(cfg.dt_max, dt_limit);
        t.steps = static_cast<std::size_t>(std::ceil(t.sim_time / dt_target));
        t.dt = t.steps ? t.sim_time / static_cast<double>(t.steps) : dt_target;
        const SimParams p{t.D, t.rho, t.K, t.dt, t.steps};
        for (std::size_t k = 0; k < t.steps; ++k) u = step_ftcs(u, p);
    }
    const std::uint64_t render_seed = derive_seed(seed, {index, 0x52});
    s.image = render_image(u, render_seed, cfg.render);
    const std::vector<double> tap =
        resample({u.values().begin(), u.values().end()}, n, n, cfg.tap_size, cfg.tap_size);
    const double tap_spacing = dx * static_cast<double>(n) / static_cast<double>(cfg.tap_size);
    s.u_true = GridField(cfg.tap_size, cfg.tap_size, tap_spacing, tap);
    return s;
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

namespace {

json truth_json(const GroundTruth& t) {
    return {{"has_lesion", t.has_lesion}, {"D", t.D},         {"rho", t.rho},     {"K", t.K},
            {"sim_time", t.sim_time},     {"dt", t.dt},       {"steps", t.steps}, {"blobs", t.blobs}};
}

GroundTruth truth_from_json(const json& j) {
    GroundTruth t;
    t.has_lesion = j.at("has_lesion").get<bool>();
    t.D = j.at("D").get<double>();
    t.rho = j.at("rho").get<double>();
    t.K = j.at("K").get<double>();
    t.sim_time = j.at("sim_time").get<double>();
    t.dt = j.at("dt").get<double>();
    t.steps = j.at("steps").get<std::size_t>();
    t.blobs = j.at("blobs").get<int>();
    return t;
}

std::string sample_stem(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%05zu", index);
    return buf;
}

// Splits one class's sample indices 80/10/10 after a seeded shuffle.
std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed, std::size_t label) {
    std::vector<std::size_t> order(n);
    for (std::size_t k = 0; k < n; ++k) order[k] = k;
    Rng rng(derive_seed(seed, {0x5B117, label}));
    rng.shuffle(order.begin(), order.end());
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
    std::vector<Split> out(n, Split::test);
    for (std::size_t r = 0; r < n; ++r) {
        out[order[r]] = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
    }
    return out;
}

}  // namespace

DatasetManifest generate_dataset(const std::vector<ClassProfile>& profiles, std::size_t n_per_class,
                                 std::uint64_t seed, const std::filesystem::path& out_dir,
                                 const GeneratorConfig& cfg) {
    namespace fs = std::filesystem;
    if (n_per_class < 1) throw std::invalid_argument("generate_dataset: n_per_class must be >= 1");
    if (profiles.size() < 2) throw std::invalid_argument("generate_dataset: need at least two class profiles");

    std::error_code ec;
    const bool existed = fs::exists(out_dir, ec);
    std::vector<fs::path> created;
    auto cleanup = [&] {
        std::error_code ignore;
        if (!existed) {
            fs::remove_all(out_dir, ignore);
            return;
        }
        for (auto it = created.rbegin(); it != created.rend(); ++it) fs::remove_all(*it, ignore);
    };

    try {
        fs::create_directories(out_dir);
        for (const char* sub : {"images", "fields"}) {
            const fs::path d = out_dir / sub;
            if (!fs::exists(d)) {
                fs::create_directories(d);
                created.push_back(d);
            }
        }
        json manifest;
        manifest["format"] = "physnet.dataset";
        manifest["version"] = 1;
        manifest["seed"] = seed;
        manifest["n_per_class"] = n_per_class;
        manifest["generator"] = to_json(cfg);
        json class_counts = json::object();
        json classes = json::array();
        json profile_table = json::array();
        for (const auto& p : profiles) {
            classes.push_back(p.name);
            class_counts[p.name] = n_per_class;
            profile_table.push_back(to_json(p));
        }
        manifest["classes"] = classes;
        manifest["class_counts"] = class_counts;
        manifest["profiles"] = profile_table;

        json samples = json::array();
        std::size_t split_counts[3] = {0, 0, 0};
        for (std::size_t label = 0; label < profiles.size(); ++label) {
            const std::vector<Split> splits = assign_splits(n_per_class, seed, label);
            for (std::size_t i = 0; i < n_per_class; ++i) {
                const std::size_t index = label * n_per_class + i;
                const SyntheticSample s =
                    generate_sample(profiles[label], static_cast<int>(label), seed, index, cfg);
                const std::string stem = sample_stem(index);
                const std::string png = io::encode_png(io::quantize(s.image.pixels, s.image.rows, s.image.cols));
                const std::string field = io::encode_le_doubles(s.u_true.values());
                json sidecar = {{"shape", {s.u_true.rows(), s.u_true.cols()}},
                                {"spacing", s.u_true.spacing()},
                                {"dtype", "float64"},
                                {"byte_order", "little"},
                                {"label", label},
                                {"class", profiles[label].name},
                                {"params", truth_json(s.truth)}};
                const std::string side = sidecar.dump(2) + "\n";
                for (const auto& [path, bytes] : {std::pair{out_dir / "images" / (stem + ".png"), &png},
                                                  std::pair{out_dir / "fields" / (stem + ".bin"), &field},
                                                  std::pair{out_dir / "fields" / (stem + ".json"), &side}}) {
                    if (!fs::exists(path)) created.push_back(path);
                    io::write_file(path, *bytes);
                }
                ++split_counts[static_cast<int>(splits[i])];
                samples.push_back({{"index", index},
                                   {"label", label},
                                   {"class", profiles[label].name},
                                   {"split", to_string(splits[i])},
                                   {"image", "images/" + stem + ".png"},
                                   {"field", "fields/" + stem + ".bin"},
                                   {"sidecar", "fields/" + stem + ".json"},
                                   {"sha256",
                                    {{"image", io::sha256_hex(png)},
                                     {"field", io::sha256_hex(field)},
                                     {"sidecar", io::sha256_hex(side)}}}});
            }
        }
        manifest["split_counts"] = {{"train", split_counts[0]}, {"val", split_counts[1]}, {"test", split_counts[2]}};
        manifest["samples"] = std::move(samples);
        const std::string bytes = manifest.dump(2) + "\n";
        const fs::path manifest_path = out_dir / "manifest.json";
        created.push_back(manifest_path);
        io::write_file(manifest_path, bytes);
        return {std::move(manifest), io::sha256_hex(bytes)};
    } catch (...) {
        cleanup();
        throw;
    }
}

std::vector<const LoadedSample*> Dataset::split(Split s) const {
    std::vector<const LoadedSample*> out;
    for (const auto& x : samples) {
        if (x.split == s) out.push_back(&x);
    }
    return out;
}

Dataset load_dataset(const std::filesystem::path& dir, bool verify) {
    Dataset ds;
    ds.root = dir;
    const std::string bytes = io::read_file(dir / "manifest.json");
    ds.manifest_checksum = io::sha256_hex(bytes);
    ds.manifest = json::parse(bytes);
    if (ds.manifest.value("format", "") != "physnet.dataset") {
        throw std::runtime_error(dir.string() + ": manifest is not a physnet dataset");
    }
    ds.class_names = ds.manifest.at("classes").get<std::vector<std::string>>();
    ds.image_size = ds.manifest.at("generator").at("image_size").get<std::size_t>();
    ds.tap_size = ds.manifest.at("generator").at("tap_size").get<std::size_t>();
    for (const json& e : ds.manifest.at("samples")) {
        LoadedSample s;
        s.index = e.at("index").get<std::size_t>();
        s.label = e.at("label").get<int>();
        s.split = split_from_string(e.at("split").get<std::string>());
        const std::string png = io::read_file(dir / e.at("image").get<std::string>());
        const std::string field = io::read_file(dir / e.at("field").get<std::string>());
        const std::string side = io::read_file(dir / e.at("sidecar").get<std::string>());
        if (verify) {
            const json& sums = e.at("sha256");
            if (io::sha256_hex(png) != sums.at("image") || io::sha256_hex(field) != sums.at("field") ||
                io::sha256_hex(side) != sums.at("sidecar")) {
                throw std::runtime_error("checksum mismatch for sample " + std::to_string(s.index));
            }
        }
        const io::GrayImage img = io::read_png(dir / e.at("image").get<std::string>());
        if (img.rows != ds.image_size || img.cols != ds.image_size) {
            throw std::runtime_error("sample " + std::to_string(s.index) + " has unexpected image size");
        }
        s.image.resize(img.pixels.size());
        for (std::size_t k = 0; k < img.pixels.size(); ++k) s.image[k] = img.pixels[k] / 255.0;
        const json sc = json::parse(side);
        const auto shape = sc.at("shape").get<std::vector<std::size_t>>();
        s.u_true = GridField(shape.at(0), shape.at(1), sc.at("spacing").get<double>(), io::decode_le_doubles(field));
        s.truth = truth_from_json(sc.at("params"));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace physnet::sim
