#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every operation in execution order; Tensor is a cheap
// handle (tape pointer + node index). Backward walks the tape once in
// reverse and accumulates gradients into every node that requires them.
// A tape belongs to one thread; build a fresh tape per step.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace physnet::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct ParamTensor {
    Shape shape;
    std::vector<double> values;
};

/// Trainable leaves keyed by name. Ordered so that iteration (and therefore
/// serialization and optimizer updates) is deterministic.
using ParameterSet = std::map<std::string, ParamTensor>;
using GradientMap = std::map<std::string, ParamTensor>;

class Tape;

class Tensor {
public:
    Tensor() = default;

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Shape& shape() const;
    std::size_t numel() const;
    std::span<const double> values() const;
    /// Value of a single-element tensor.
    double item() const;
    bool requires_grad() const;

private:
    friend class Tape;
    Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    struct Node {
        std::string op;
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // empty until something flows into it
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        std::string leaf_name;  // non-empty for trainable leaves
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor constant(Shape shape, std::vector<double> values);
    Tensor scalar(double value) { return constant({1}, {value}); }
    Tensor leaf(const std::string& name, const ParamTensor& param);

    /// Registers every parameter as a trainable leaf.
    std::map<std::string, Tensor> bind(const ParameterSet& params);

    /// Records an operation. `fn` is dropped when no input requires a gradient.
    Tensor record(std::string op, Shape shape, std::vector<double> value, std::vector<std::size_t> inputs,
                  BackwardFn fn);

    /// Seeds d(loss)/d(loss) = 1 and visits each node once in reverse order.
    void backward(const Tensor& loss);

    /// Gradients of all trainable leaves; untouched leaves get zeros.
    GradientMap gradients() const;

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    Node& node(std::size_t id) { return nodes_[id]; }

    /// Gradient buffer of node `id`, allocated (zeroed) on first use.
    std::vector<double>& grad_of(std::size_t id);

private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// Elementwise arithmetic. Shapes must match, except that a single-element
// operand broadcasts against the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Cross-correlation with zero padding. input [N,C,H,W], kernel [F,C,kH,kW],
/// optional bias [F]. Output [N,F,(H+2p-kH)/s+1,(W+2p-kW)/s+1].
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding);

/// Five-point Laplacian per [N,1,H,W] slice, replicate padding, matching
/// grid::laplacian_5pt bit for bit.
Tensor stencil_laplacian(const Tensor& input, double spacing = 1.0);

/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

/// x [N,Cin] * weight[Cout,Cin]^T + bias[Cout]
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Runs the tape backward from a scalar loss and returns leaf gradients.
GradientMap backward(const Tensor& loss);

/// A recorded scalar function of named parameters.
using ScalarFunction = std::function<Tensor(Tape&, const std::map<std::string, Tensor>&)>;

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Denominator floor in |a - n| / max(|a|, |n|, floor); keeps
    /// near-zero gradients from reporting pure round-off as error.
    double denominator_floor = 1e-6;
    /// Elements with |analytic| and |numeric| both below this are skipped
    /// as well; 0 checks everything.
    double skip_below = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    bool passed = true;
};

/// Compares analytic gradients with central differences for every element
/// of every parameter.
GradCheckReport grad_check(const ScalarFunction& f, const ParameterSet& params, const GradCheckOptions& opts = {});

// Checkpoint format: one line of JSON header (names -> shape, byte offset,
// count) terminated by '\n', followed by little-endian IEEE-754 doubles.
void save_parameters(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_parameters(const std::filesystem::path& path);
std::size_t parameter_count(const ParameterSet& params);

}  // namespace physnet::ad
