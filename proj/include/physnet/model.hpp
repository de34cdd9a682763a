#pragma once

// Dual-branch network: a small residual convolutional backbone whose
// intermediate (tap) features feed two field heads (density u and its time
// derivative), while the last stage feeds the classifier. Three global
// scalars D, rho, K are kept positive through softplus.

#include "physnet/autodiff.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace physnet::model {

struct StageConfig {
    std::size_t channels = 16;
    int stride = 2;
};

struct BackboneConfig {
    std::size_t input_size = 112;
    std::size_t in_channels = 1;
    std::vector<StageConfig> stages{{16, 2}, {32, 2}, {64, 2}, {128, 2}};
    std::size_t tap_stage = 3;  // 1-based; its output feeds the field heads
    std::size_t head_hidden = 16;

    /// Spatial size after `stage` stages (stage 0 is the input).
    std::size_t spatial_size(std::size_t stage) const;
    std::size_t tap_size() const { return spatial_size(tap_stage); }
    /// Throws std::invalid_argument when the tap grid is smaller than 3x3
    /// or the tap is not strictly before the last stage.
    void validate() const;
};

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_from_json(const nlohmann::json& j);

/// Convolution weights are fan-in scaled uniform, biases zero, and the raw
/// physical weights w_D, w_rho, w_K uniform in [-1, 1].
ad::ParameterSet init_model(const BackboneConfig& cfg, std::size_t n_classes, std::uint64_t seed);

struct ForwardOptions {
    bool classifier = true;
    bool u_head = true;
    bool dudt_head = true;
};

/// Tensors for one forward pass. Heads that were not requested are left
/// as invalid handles.
struct ModelOutput {
    ad::Tensor logits;  // [N, M]
    ad::Tensor u;       // [N, 1, tap, tap], K * sigmoid(raw)
    ad::Tensor u_gate;  // sigmoid(raw)
    ad::Tensor dudt;    // [N, 1, tap, tap]
    ad::Tensor D, rho, K;
};

using Bindings = std::map<std::string, ad::Tensor>;

ModelOutput forward(const BackboneConfig& cfg, const Bindings& params, const ad::Tensor& images,
                    const ForwardOptions& opts = {});

struct PhysicalValues {
    double D = 0.0;
    double rho = 0.0;
    double K = 0.0;
};

PhysicalValues expose_physical_params(const ad::ParameterSet& params);

/// Packs images (each input_size^2, single channel) into an [N,1,H,W] constant.
ad::Tensor image_batch(ad::Tape& tape, const std::vector<const std::vector<double>*>& images, std::size_t size);

/// Parameter names owned by the classifier path (backbone + classifier),
/// as opposed to the field heads and physical scalars.
bool is_head_parameter(const std::string& name);
bool is_physical_parameter(const std::string& name);

}  // namespace physnet::model
