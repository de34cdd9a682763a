#pragma once

// Forward Fisher-KPP solver and the synthetic labelled corpus built on it.

#include "physnet/grid.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace physnet::sim {

using grid::GridField;

/// Physical parameters and time stepping for one simulation. D in mm^2/day,
/// rho in 1/day, dt in days. The grid (shape and spacing in mm) is the
/// field being stepped. rho may be 0 (pure diffusion); D and K must be > 0.
struct SimParams {
    double D = 0.1;
    double rho = 0.01;
    double K = 1.0;
    double dt = 1.0;
    std::size_t steps = 0;
};

/// Throws std::invalid_argument on bad parameters or when
/// dt > spacing^2 / (4 D).
void validate(const SimParams& p, double spacing);

/// One explicit forward-time central-space step followed by clamping to
/// [0, K]. When `max_clamp` is given it receives the largest amount by
/// which any value had to be moved back into range.
GridField step_ftcs(const GridField& u, const SimParams& p, double* max_clamp = nullptr);

struct Snapshot {
    double time = 0.0;
    GridField field;
};

/// Runs p.steps steps, recording the initial field, every
/// `snapshot_every`-th step, and the final state.
std::vector<Snapshot> simulate(const GridField& initial, const SimParams& p, std::size_t snapshot_every = 1,
                               double* max_clamp = nullptr);

struct FrontSpeed {
    bool measurable = false;
    double speed = 0.0;  // grid length units per time unit
    std::string reason;  // set when not measurable
};

/// Equivalent radius sqrt(area{u > level} / pi) fitted linearly against
/// time over the last half of the snapshots.
FrontSpeed measure_front_speed(const std::vector<Snapshot>& snapshots, double level);

/// Equivalent radius of the super-level set {u > level}.
double level_set_radius(const GridField& u, double level);

/// Gaussian bump amplitude * exp(-r^2 / (2 sigma^2)), r in grid length units.
GridField gaussian_blob(std::size_t rows, std::size_t cols, double spacing, double center_row, double center_col,
                        double sigma, double amplitude);

/// Area-averaging when shrinking, bilinear when enlarging.
std::vector<double> resample(const std::vector<double>& src, std::size_t rows, std::size_t cols,
                             std::size_t out_rows, std::size_t out_cols);

struct RenderOptions {
    std::size_t output_size = 112;
    double noise_sd = 0.02;
    double foreground = 0.85;
    double background_level = 0.22;
};

struct Image {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> pixels;  // row-major, in [0, 1]
};

/// Smooth random background (a few low-frequency cosines), used by
/// render_image; exposed for tests.
std::vector<double> background_texture(std::size_t rows, std::size_t cols, std::uint64_t seed, double level);

/// Maps density to intensity over the background, resamples to the output
/// size, adds Gaussian noise and clamps to [0, 1].
Image render_image(const GridField& u, std::uint64_t noise_seed, const RenderOptions& opts = {});

struct BlobPlacement {
    double center_row = 0.5;  // fractions of the grid extent
    double center_col = 0.5;
    double radius_min = 0.0;
    double radius_max = 0.0;
};

struct ClassProfile {
    std::string name;
    bool has_lesion = true;
    double D_mean = 0.0, D_sd = 0.0;
    double rho_mean = 0.0, rho_sd = 0.0;
    double K_mean = 1.0, K_sd = 0.0;
    int blobs_min = 1;
    int blobs_max = 1;
    BlobPlacement placement;
    double blob_sigma_min = 1.5, blob_sigma_max = 3.0;          // mm
    double blob_amplitude_min = 0.3, blob_amplitude_max = 0.6;  // fraction of K
};

/// glioma-like, meningioma-like, pituitary-like, no-tumor (label order).
std::vector<ClassProfile> default_profiles();

nlohmann::json to_json(const ClassProfile& p);
ClassProfile profile_from_json(const nlohmann::json& j);

struct GeneratorConfig {
    std::size_t sim_size = 128;
    double sim_spacing = 1.0;  // mm
    double t_min = 50.0;       // days
    double t_max = 400.0;
    double dt_max = 1.0;
    std::size_t tap_size = 14;
    RenderOptions render;
};

nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

struct GroundTruth {
    bool has_lesion = false;
    double D = 0.0;
    double rho = 0.0;
    double K = 0.0;
    double sim_time = 0.0;
    double dt = 0.0;
    std::size_t steps = 0;
    int blobs = 0;
};

struct SyntheticSample {
    Image image;
    int label = 0;
    GroundTruth truth;
    GridField u_true{3, 3};  // on the tap grid
};

/// Draws one sample from `profile`, deterministically from (seed, index).
SyntheticSample generate_sample(const ClassProfile& profile, int label, std::uint64_t seed, std::size_t index,
                                const GeneratorConfig& cfg);

struct DatasetManifest {
    nlohmann::json json;
    std::string checksum;  // sha256 of the manifest file bytes
};

/// Writes images (PNG), density fields (raw doubles + JSON sidecar) and
/// manifest.json under out_dir. Splits 80/10/10 per class by a seeded
/// shuffle. On failure anything written is removed and the error rethrown.
DatasetManifest generate_dataset(const std::vector<ClassProfile>& profiles, std::size_t n_per_class,
                                 std::uint64_t seed, const std::filesystem::path& out_dir,
                                 const GeneratorConfig& cfg = {});

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct LoadedSample {
    std::size_t index = 0;
    int label = 0;
    Split split = Split::train;
    std::vector<double> image;  // pixels / 255
    GridField u_true{3, 3};
    GroundTruth truth;
};

struct Dataset {
    std::filesystem::path root;
    nlohmann::json manifest;
    std::string manifest_checksum;
    std::vector<std::string> class_names;
    std::size_t image_size = 0;
    std::size_t tap_size = 0;
    std::vector<LoadedSample> samples;

    std::vector<const LoadedSample*> split(Split s) const;
    std::size_t n_classes() const { return class_names.size(); }
};

/// Loads a generated corpus; with verify set, every file checksum is
/// compared to the manifest.
Dataset load_dataset(const std::filesystem::path& dir, bool verify = true);

}  // namespace physnet::sim
