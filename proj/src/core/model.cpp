#include "physnet/model.hpp"

#include "physnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace physnet::model {

using nlohmann::json;
using namespace physnet::ad;

namespace {

std::string stage_name(std::size_t s) { return "stage" + std::to_string(s); }

void add_conv(ParameterSet& params, const std::string& name, std::size_t out_ch, std::size_t in_ch, std::size_t k,
              double bound, Rng& rng) {
    ParamTensor w{{out_ch, in_ch, k, k}, {}};
    w.values.resize(numel(w.shape));
    for (double& v : w.values) v = rng.uniform(-bound, bound);
    params[name + ".weight"] = std::move(w);
    params[name + ".bias"] = ParamTensor{{out_ch}, std::vector<double>(out_ch, 0.0)};
}

double he_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }
double lecun_bound(std::size_t fan_in) { return std::sqrt(3.0 / static_cast<double>(fan_in)); }

Tensor conv(const Bindings& p, const std::string& name, const Tensor& x, int stride, int pad) {
    return conv2d(x, p.at(name + ".weight"), p.at(name + ".bias"), stride, pad);
}

Tensor field_head(const Bindings& p, const std::string& name, const Tensor& features) {
    return conv(p, name + ".conv1", relu(conv(p, name + ".conv3", features, 1, 1)), 1, 0);
}

}  // namespace

std::size_t BackboneConfig::spatial_size(std::size_t stage) const {
    std::size_t s = input_size;
    for (std::size_t k = 0; k < stage && k < stages.size(); ++k) {
        const auto stride = static_cast<std::size_t>(stages[k].stride);
        s = (s + 2 - 3) / stride + 1;
    }
    return s;
}

void BackboneConfig::validate() const {
    if (stages.size() < 2) throw std::invalid_argument("BackboneConfig: need at least two stages");
    if (tap_stage < 1 || tap_stage >= stages.size()) {
        throw std::invalid_argument("BackboneConfig: tap stage must lie before the final stage");
    }
    if (input_size < 3 || in_channels < 1 || head_hidden < 1) throw std::invalid_argument("BackboneConfig: bad sizes");
    for (const auto& s : stages) {
        if (s.channels < 1 || s.stride < 1) throw std::invalid_argument("BackboneConfig: bad stage");
    }
    if (tap_size() < 3) {
        throw std::invalid_argument("BackboneConfig: tap grid " + std::to_string(tap_size()) +
                                    "x" + std::to_string(tap_size()) + " is smaller than 3x3");
    }
}

json to_json(const BackboneConfig& c) {
    json stages = json::array();
    for (const auto& s : c.stages) stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
    return {{"input_size", c.input_size},
            {"in_channels", c.in_channels},
            {"stages", stages},
            {"tap_stage", c.tap_stage},
            {"head_hidden", c.head_hidden}};
}

BackboneConfig backbone_from_json(const json& j) {
    static const std::vector<std::string> known{"input_size", "in_channels", "stages", "tap_stage", "head_hidden"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(known.begin(), known.end(), k) == known.end()) {
            throw std::invalid_argument("backbone config: unknown key '" + k + "'");
        }
    }
    BackboneConfig c;
    c.input_size = j.value("input_size", c.input_size);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.tap_stage = j.value("tap_stage", c.tap_stage);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    if (j.contains("stages")) {
        c.stages.clear();
        for (const json& s : j.at("stages")) c.stages.push_back({s.at("channels").get<std::size_t>(), s.at("stride").get<int>()});
    }
    c.validate();
    return c;
}

ParameterSet init_model(const BackboneConfig& cfg, std::size_t n_classes, std::uint64_t seed) {
    cfg.validate();
    if (n_classes < 2) throw std::invalid_argument("init_model: need at least two classes");
    Rng rng(derive_seed(seed, {0x1417}));
    ParameterSet p;
    std::size_t in_ch = cfg.in_channels;
    for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
        const std::size_t ch = cfg.stages[s].channels;
        const std::string name = stage_name(s + 1);
        add_conv(p, name + ".down", ch, in_ch, 3, he_bound(in_ch * 9), rng);
        add_conv(p, name + ".res", ch, ch, 3, he_bound(ch * 9), rng);
        in_ch = ch;
    }
    const std::size_t tap_ch = cfg.stages[cfg.tap_stage - 1].channels;
    for (const char* head : {"u_head", "dudt_head"}) {
        add_conv(p, std::string(head) + ".conv3", cfg.head_hidden, tap_ch, 3, he_bound(tap_ch * 9), rng);
        add_conv(p, std::string(head) + ".conv1", 1, cfg.head_hidden, 1, lecun_bound(cfg.head_hidden), rng);
    }
    const std::size_t last_ch = cfg.stages.back().channels;
    ParamTensor w{{n_classes, last_ch}, std::vector<double>(n_classes * last_ch)};
    for (double& v : w.values) v = rng.uniform(-lecun_bound(last_ch), lecun_bound(last_ch));
    p["classifier.weight"] = std::move(w);
    p["classifier.bias"] = ParamTensor{{n_classes}, std::vector<double>(n_classes, 0.0)};
    for (const char* name : {"physics.w_D", "physics.w_rho", "physics.w_K"}) {
        p[name] = ParamTensor{{1}, {rng.uniform(-1.0, 1.0)}};
    }
    return p;
}

ModelOutput forward(const BackboneConfig& cfg, const Bindings& params, const Tensor& images, const ForwardOptions& opts) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size) {
        throw std::invalid_argument("forward: expected images [N," + std::to_string(cfg.in_channels) + "," +
                                    std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                                    "], got " + to_string(s));
    }
    ModelOutput out;
    out.D = softplus(params.at("physics.w_D"));
    out.rho = softplus(params.at("physics.w_rho"));
    out.K = softplus(params.at("physics.w_K"));

    const bool any_head = opts.u_head || opts.dudt_head;
    const std::size_t last_needed = opts.classifier ? cfg.stages.size() : (any_head ? cfg.tap_stage : 0);
    Tensor x = images;
    Tensor tap;
    for (std::size_t k = 0; k < last_needed; ++k) {
        const std::string name = stage_name(k + 1);
        const Tensor h = relu(conv(params, name + ".down", x, cfg.stages[k].stride, 1));
        x = add(h, relu(conv(params, name + ".res", h, 1, 1)));
        if (k + 1 == cfg.tap_stage) tap = x;
    }
    if (opts.u_head) {
        out.u_gate = sigmoid(field_head(params, "u_head", tap));
        out.u = mul(out.K, out.u_gate);
    }
    if (opts.dudt_head) out.dudt = field_head(params, "dudt_head", tap);
    if (opts.classifier) {
        out.logits = dense(global_avg_pool(x), params.at("classifier.weight"), params.at("classifier.bias"));
    }
    return out;
}

PhysicalValues expose_physical_params(const ParameterSet& params) {
    Tape tape;
    auto sp = [&](const char* name) { return softplus(tape.constant({1}, params.at(name).values)).item(); };
    return {sp("physics.w_D"), sp("physics.w_rho"), sp("physics.w_K")};
}

Tensor image_batch(Tape& tape, const std::vector<const std::vector<double>*>& images, std::size_t size) {
    std::vector<double> data;
    data.reserve(images.size() * size * size);
    for (const auto* img : images) {
        if (img->size() != size * size) throw std::invalid_argument("image_batch: image has wrong size");
        data.insert(data.end(), img->begin(), img->end());
    }
    return tape.constant({images.size(), 1, size, size}, std::move(data));
}

bool is_head_parameter(const std::string& name) {
    return name.starts_with("u_head.") || name.starts_with("dudt_head.");
}

bool is_physical_parameter(const std::string& name) { return name.starts_with("physics."); }

}  // namespace physnet::model
