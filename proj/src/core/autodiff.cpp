#include "physnet/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace physnet::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_tape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": invalid tensor handle");
    if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": tensors live on different tapes");
}

enum class Broadcast { none, left_scalar, right_scalar };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
    require_same_tape(a, b, op);
    if (a.shape() == b.shape()) return Broadcast::none;
    if (a.numel() == 1) return Broadcast::left_scalar;
    if (b.numel() == 1) return Broadcast::right_scalar;
    std::ostringstream os;
    os << op << ": shape mismatch " << to_string(a.shape()) << " vs " << to_string(b.shape());
    throw std::invalid_argument(os.str());
}

// Shared driver for elementwise binary ops. `fwd(x, y)` computes the value;
// `dx(x, y, g)` and `dy(x, y, g)` the contributions to each input gradient.
template <class Fwd, class Dx, class Dy>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Dx dx, Dy dy) {
    const Broadcast mode = broadcast_mode(a, b, op);
    const Shape out_shape = mode == Broadcast::left_scalar ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double x = mode == Broadcast::left_scalar ? av[0] : av[k];
        const double y = mode == Broadcast::right_scalar ? bv[0] : bv[k];
        out[k] = fwd(x, y);
    }
    const std::size_t ia = a.id();
    const std::size_t ib = b.id();
    return a.tape().record(op, out_shape, std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
        const std::vector<double>& g = t.node(self).grad;
        const std::vector<double>& xa = t.node(ia).value;
        const std::vector<double>& yb = t.node(ib).value;
        const bool need_a = t.node(ia).requires_grad;
        const bool need_b = t.node(ib).requires_grad;
        for (std::size_t k = 0; k < g.size(); ++k) {
            const std::size_t ka = mode == Broadcast::left_scalar ? 0 : k;
            const std::size_t kb = mode == Broadcast::right_scalar ? 0 : k;
            const double x = xa[ka];
            const double y = yb[kb];
            if (need_a) t.grad_of(ia)[ka] += dx(x, y, g[k]);
            if (need_b) t.grad_of(ib)[kb] += dy(x, y, g[k]);
        }
    });
}

template <class Fwd, class Deriv>
Tensor unary_op(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t k = 0; k < xv.size(); ++k) out[k] = fwd(xv[k]);
    const std::size_t ix = x.id();
    return x.tape().record(op, x.shape(), std::move(out), {ix}, [=](Tape& t, std::size_t self) {
        const std::vector<double>& g = t.node(self).grad;
        const std::vector<double>& in = t.node(ix).value;
        const std::vector<double>& y = t.node(self).value;
        std::vector<double>& gx = t.grad_of(ix);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * deriv(in[k], y[k]);
    });
}

double stable_sigmoid(double x) {
    constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    constexpr double lo = std::numeric_limits<double>::denorm_min();
    double s;
    if (x >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-x));
    } else {
        const double e = std::exp(x);
        s = e / (1.0 + e);
    }
    return std::clamp(s, lo, hi);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
    if (t.shape().size() != rank) {
        std::ostringstream os;
        os << op << ": " << what << " must have rank " << rank << ", got " << to_string(t.shape());
        throw std::invalid_argument(os.str());
    }
}

struct ConvGeometry {
    std::size_t N, C, H, W, F, kH, kW, Ho, Wo, stride, pad;
    std::size_t ckk() const { return C * kH * kW; }
    std::size_t pixels() const { return Ho * Wo; }
};

void im2col(const double* in, const ConvGeometry& g, double* col) {
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.C; ++c) {
        for (std::size_t ki = 0; ki < g.kH; ++ki) {
            for (std::size_t kj = 0; kj < g.kW; ++kj) {
                double* row = col + ((c * g.kH + ki) * g.kW + kj) * P;
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + oh * g.Wo;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) {
                        std::fill(dst, dst + g.Wo, 0.0);
                        continue;
                    }
                    const double* src = in + (c * g.H + static_cast<std::size_t>(ih)) * g.W;
                    for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                        const auto iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) ? 0.0 : src[iw];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvGeometry& g, double* in_grad) {
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.C; ++c) {
        for (std::size_t ki = 0; ki < g.kH; ++ki) {
            for (std::size_t kj = 0; kj < g.kW; ++kj) {
                const double* row = col + ((c * g.kH + ki) * g.kW + kj) * P;
                for (std::size_t oh = 0; oh < g.Ho; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
                    double* dst = in_grad + (c * g.H + static_cast<std::size_t>(ih)) * g.W;
                    const double* src = row + oh * g.Wo;
                    for (std::size_t ow = 0; ow < g.Wo; ++ow) {
                        const auto iw =
                            static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.W)) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

Tensor conv2d_impl(const Tensor& input, const Tensor& kernel, const Tensor* bias, int stride, int padding) {
    require_same_tape(input, kernel, "conv2d");
    require_rank(input, 4, "conv2d", "input");
    require_rank(kernel, 4, "conv2d", "kernel");
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
    const Shape& is = input.shape();
    const Shape& ks = kernel.shape();
    const auto pad = static_cast<std::size_t>(padding);
    if (is[1] != ks[1] || ks[2] > is[2] + 2 * pad || ks[3] > is[3] + 2 * pad) {
        std::ostringstream os;
        os << "conv2d: incompatible input " << to_string(is) << " and kernel " << to_string(ks) << " (padding "
           << padding << ")";
        throw std::invalid_argument(os.str());
    }
    if (bias) {
        require_same_tape(input, *bias, "conv2d");
        if (bias->shape() != Shape{ks[0]}) {
            throw std::invalid_argument("conv2d: bias shape " + to_string(bias->shape()) + " does not match " +
                                        std::to_string(ks[0]) + " filters");
        }
    }
    ConvGeometry g{is[0], is[1], is[2], is[3], ks[0], ks[2], ks[3], 0, 0, static_cast<std::size_t>(stride), pad};
    g.Ho = (g.H + 2 * pad - g.kH) / g.stride + 1;
    g.Wo = (g.W + 2 * pad - g.kW) / g.stride + 1;

    const std::size_t P = g.pixels();
    const std::size_t CKK = g.ckk();
    std::vector<double> out(g.N * g.F * P);
    std::vector<double> col(CKK * P);
    const double* x = input.values().data();
    ConstMapMat K(kernel.values().data(), static_cast<Eigen::Index>(g.F), static_cast<Eigen::Index>(CKK));
    for (std::size_t n = 0; n < g.N; ++n) {
        im2col(x + n * g.C * g.H * g.W, g, col.data());
        ConstMapMat cm(col.data(), static_cast<Eigen::Index>(CKK), static_cast<Eigen::Index>(P));
        MapMat Y(out.data() + n * g.F * P, static_cast<Eigen::Index>(g.F), static_cast<Eigen::Index>(P));
        Y.noalias() = K * cm;
        if (bias) {
            const auto b = bias->values();
            for (std::size_t f = 0; f < g.F; ++f) Y.row(static_cast<Eigen::Index>(f)).array() += b[f];
        }
    }

    std::vector<std::size_t> inputs{input.id(), kernel.id()};
    if (bias) inputs.push_back(bias->id());
    const std::size_t ii = input.id();
    const std::size_t ik = kernel.id();
    const std::size_t ib = bias ? bias->id() : 0;
    const bool has_bias = bias != nullptr;
    return input.tape().record(
        "conv2d", {g.N, g.F, g.Ho, g.Wo}, std::move(out), std::move(inputs), [=](Tape& t, std::size_t self) {
            const std::vector<double>& gy = t.node(self).grad;
            const bool need_in = t.node(ii).requires_grad;
            const bool need_k = t.node(ik).requires_grad;
            const bool need_b = has_bias && t.node(ib).requires_grad;
            const std::vector<double>& xin = t.node(ii).value;
            ConstMapMat Kb(t.node(ik).value.data(), static_cast<Eigen::Index>(g.F), static_cast<Eigen::Index>(CKK));
            std::vector<double> colb(CKK * P);
            RowMat dK;
            if (need_k) dK = RowMat::Zero(static_cast<Eigen::Index>(g.F), static_cast<Eigen::Index>(CKK));
            for (std::size_t n = 0; n < g.N; ++n) {
                ConstMapMat dY(gy.data() + n * g.F * P, static_cast<Eigen::Index>(g.F), static_cast<Eigen::Index>(P));
                if (need_k) {
                    im2col(xin.data() + n * g.C * g.H * g.W, g, colb.data());
                    ConstMapMat cm(colb.data(), static_cast<Eigen::Index>(CKK), static_cast<Eigen::Index>(P));
                    dK.noalias() += dY * cm.transpose();
                }
                if (need_in) {
                    MapMat dcol(colb.data(), static_cast<Eigen::Index>(CKK), static_cast<Eigen::Index>(P));
                    dcol.noalias() = Kb.transpose() * dY;
                    col2im_add(colb.data(), g, t.grad_of(ii).data() + n * g.C * g.H * g.W);
                }
                if (need_b) {
                    std::vector<double>& gb = t.grad_of(ib);
                    // Plain loop: Eigen's vectorised sum depends on the buffer's alignment.
                    const double* dy = gy.data() + n * g.F * P;
                    for (std::size_t f = 0; f < g.F; ++f) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < P; ++p) acc += dy[f * P + p];
                        gb[f] += acc;
                    }
                }
            }
            if (need_k) {
                std::vector<double>& gk = t.grad_of(ik);
                const double* d = dK.data();
                for (std::size_t k = 0; k < gk.size(); ++k) gk[k] += d[k];
            }
        });
}

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t k = 0; k < shape.size(); ++k) os << (k ? "," : "") << shape[k];
    os << ']';
    return os.str();
}

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::size_t Tensor::numel() const { return tape_->node(id_).value.size(); }
std::span<const double> Tensor::values() const { return tape_->node(id_).value; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
    return values()[0];
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) {
        throw std::invalid_argument("constant: shape " + to_string(shape) + " does not match " +
                                    std::to_string(values.size()) + " values");
    }
    return record("constant", std::move(shape), std::move(values), {}, nullptr);
}

Tensor Tape::leaf(const std::string& name, const ParamTensor& param) {
    if (numel(param.shape) != param.values.size()) {
        throw std::invalid_argument("leaf '" + name + "': shape " + to_string(param.shape) + " does not match " +
                                    std::to_string(param.values.size()) + " values");
    }
    Node n;
    n.op = "leaf";
    n.shape = param.shape;
    n.value = param.values;
    n.requires_grad = true;
    n.leaf_name = name;
    nodes_.push_back(std::move(n));
    return Tensor(this, nodes_.size() - 1);
}

std::map<std::string, Tensor> Tape::bind(const ParameterSet& params) {
    std::map<std::string, Tensor> out;
    for (const auto& [name, p] : params) out.emplace(name, leaf(name, p));
    return out;
}

Tensor Tape::record(std::string op, Shape shape, std::vector<double> value, std::vector<std::size_t> inputs,
                    BackwardFn fn) {
    if (backward_done_) throw std::logic_error("tape: cannot record after backward()");
    for (std::size_t k = 0; k < value.size(); ++k) {
        if (!std::isfinite(value[k])) {
            std::ostringstream os;
            os << op << ": non-finite output " << value[k] << " at flat index " << k;
            throw std::domain_error(os.str());
        }
    }
    Node n;
    n.op = std::move(op);
    n.shape = std::move(shape);
    n.value = std::move(value);
    for (std::size_t in : inputs) {
        if (in >= nodes_.size()) throw std::logic_error("tape: input recorded after its consumer");
        n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    }
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Tensor(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void Tape::backward(const Tensor& loss) {
    if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " + to_string(loss.shape()));
    if (backward_done_) throw std::logic_error("backward: already run on this tape");
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_of(loss.id())[0] = 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, id);
    }
}

GradientMap Tape::gradients() const {
    GradientMap out;
    for (const Node& n : nodes_) {
        if (n.leaf_name.empty()) continue;
        ParamTensor g{n.shape, n.grad.empty() ? std::vector<double>(n.value.size(), 0.0) : n.grad};
        auto [it, inserted] = out.emplace(n.leaf_name, std::move(g));
        if (!inserted) {
            for (std::size_t k = 0; k < it->second.values.size(); ++k) {
                it->second.values[k] += n.grad.empty() ? 0.0 : n.grad[k];
            }
        }
    }
    return out;
}

GradientMap backward(const Tensor& loss) {
    loss.tape().backward(loss);
    return loss.tape().gradients();
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
        [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
        [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double g) { return g * y; },
        [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double g) { return g / y; },
        [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor scale(const Tensor& x, double factor) {
    return unary_op(
        "scale", x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
    return unary_op(
        "add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
    return unary_op(
        "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sum(const Tensor& x) {
    const auto v = x.values();
    double s = 0.0;
    for (double e : v) s += e;
    const std::size_t ix = x.id();
    return x.tape().record("sum", {1}, {s}, {ix}, [ix](Tape& t, std::size_t self) {
        const double g = t.node(self).grad[0];
        for (double& e : t.grad_of(ix)) e += g;
    });
}

Tensor mean(const Tensor& x) {
    const auto v = x.values();
    double s = 0.0;
    for (double e : v) s += e;
    const double n = static_cast<double>(v.size());
    const std::size_t ix = x.id();
    return x.tape().record("mean", {1}, {s / n}, {ix}, [ix, n](Tape& t, std::size_t self) {
        const double g = t.node(self).grad[0] / n;
        for (double& e : t.grad_of(ix)) e += g;
    });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
    return unary_op("softplus", x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op("sigmoid", x, stable_sigmoid, [](double, double s) { return s * (1.0 - s); });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    return conv2d_impl(input, kernel, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
    return conv2d_impl(input, kernel, &bias, stride, padding);
}

Tensor stencil_laplacian(const Tensor& input, double spacing) {
    require_rank(input, 4, "stencil_laplacian", "input");
    const Shape& s = input.shape();
    if (s[1] != 1) throw std::invalid_argument("stencil_laplacian: expects one channel, got " + to_string(s));
    const std::size_t N = s[0];
    const std::size_t H = s[2];
    const std::size_t W = s[3];
    if (H < 3 || W < 3) throw std::invalid_argument("stencil_laplacian: needs H, W >= 3, got " + to_string(s));
    if (!(spacing > 0.0)) throw std::invalid_argument("stencil_laplacian: spacing must be > 0");
    const double h2 = spacing * spacing;
    const auto v = input.values();
    std::vector<double> out(v.size());
    for (std::size_t n = 0; n < N; ++n) {
        const double* u = v.data() + n * H * W;
        double* o = out.data() + n * H * W;
        for (std::size_t i = 0; i < H; ++i) {
            const std::size_t up = i == 0 ? 0 : i - 1;
            const std::size_t down = i + 1 == H ? i : i + 1;
            for (std::size_t j = 0; j < W; ++j) {
                const std::size_t left = j == 0 ? 0 : j - 1;
                const std::size_t right = j + 1 == W ? j : j + 1;
                const double nb = u[down * W + j] + u[up * W + j] + u[i * W + right] + u[i * W + left];
                o[i * W + j] = (nb - 4.0 * u[i * W + j]) / h2;
            }
        }
    }
    const std::size_t ix = input.id();
    return input.tape().record("stencil_laplacian", s, std::move(out), {ix}, [=](Tape& t, std::size_t self) {
        const std::vector<double>& g = t.node(self).grad;
        std::vector<double>& gx = t.grad_of(ix);
        for (std::size_t n = 0; n < N; ++n) {
            const double* go = g.data() + n * H * W;
            double* gu = gx.data() + n * H * W;
            for (std::size_t i = 0; i < H; ++i) {
                const std::size_t up = i == 0 ? 0 : i - 1;
                const std::size_t down = i + 1 == H ? i : i + 1;
                for (std::size_t j = 0; j < W; ++j) {
                    const std::size_t left = j == 0 ? 0 : j - 1;
                    const std::size_t right = j + 1 == W ? j : j + 1;
                    // Clamped neighbours alias the centre cell on the edges,
                    // so those cells collect several contributions.
                    const double gg = go[i * W + j] / h2;
                    gu[down * W + j] += gg;
                    gu[up * W + j] += gg;
                    gu[i * W + right] += gg;
                    gu[i * W + left] += gg;
                    gu[i * W + j] -= 4.0 * gg;
                }
            }
        }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool", "input");
    const Shape& s = x.shape();
    const std::size_t NC = s[0] * s[1];
    const std::size_t HW = s[2] * s[3];
    const auto v = x.values();
    std::vector<double> out(NC);
    for (std::size_t k = 0; k < NC; ++k) {
        double acc = 0.0;
        for (std::size_t p = 0; p < HW; ++p) acc += v[k * HW + p];
        out[k] = acc / static_cast<double>(HW);
    }
    const std::size_t ix = x.id();
    return x.tape().record("global_avg_pool", {s[0], s[1]}, std::move(out), {ix}, [=](Tape& t, std::size_t self) {
        const std::vector<double>& g = t.node(self).grad;
        std::vector<double>& gx = t.grad_of(ix);
        for (std::size_t k = 0; k < NC; ++k) {
            const double share = g[k] / static_cast<double>(HW);
            for (std::size_t p = 0; p < HW; ++p) gx[k * HW + p] += share;
        }
    });
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_same_tape(x, weight, "dense");
    require_same_tape(x, bias, "dense");
    require_rank(x, 2, "dense", "input");
    require_rank(weight, 2, "dense", "weight");
    const std::size_t N = x.shape()[0];
    const std::size_t Cin = x.shape()[1];
    const std::size_t Cout = weight.shape()[0];
    if (weight.shape()[1] != Cin || bias.shape() != Shape{Cout}) {
        std::ostringstream os;
        os << "dense: input " << to_string(x.shape()) << " incompatible with weight " << to_string(weight.shape())
           << " and bias " << to_string(bias.shape());
        throw std::invalid_argument(os.str());
    }
    const auto xv = x.values();
    const auto wv = weight.values();
    const auto bv = bias.values();
    std::vector<double> out(N * Cout);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < Cout; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < Cin; ++i) acc += xv[n * Cin + i] * wv[o * Cin + i];
            out[n * Cout + o] = acc + bv[o];
        }
    }
    const std::size_t ix = x.id();
    const std::size_t iw = weight.id();
    const std::size_t ib = bias.id();
    return x.tape().record("dense", {N, Cout}, std::move(out), {ix, iw, ib}, [=](Tape& t, std::size_t self) {
        const std::vector<double>& g = t.node(self).grad;
        const std::vector<double>& xin = t.node(ix).value;
        const std::vector<double>& w = t.node(iw).value;
        if (t.node(ix).requires_grad) {
            std::vector<double>& gx = t.grad_of(ix);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Cout; ++o)
                    for (std::size_t i = 0; i < Cin; ++i) gx[n * Cin + i] += g[n * Cout + o] * w[o * Cin + i];
        }
        if (t.node(iw).requires_grad) {
            std::vector<double>& gw = t.grad_of(iw);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Cout; ++o)
                    for (std::size_t i = 0; i < Cin; ++i) gw[o * Cin + i] += g[n * Cout + o] * xin[n * Cin + i];
        }
        if (t.node(ib).requires_grad) {
            std::vector<double>& gb = t.grad_of(ib);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Cout; ++o) gb[o] += g[n * Cout + o];
        }
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank(logits, 2, "softmax_cross_entropy", "logits");
    const std::size_t N = logits.shape()[0];
    const std::size_t M = logits.shape()[1];
    if (labels.size() != N) {
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                    std::to_string(N));
    }
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= M) {
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(labels[n]) + " at row " +
                                        std::to_string(n) + " outside [0, " + std::to_string(M) + ")");
        }
    }
    const auto z = logits.values();
    std::vector<double> probs(N * M);
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const double* row = z.data() + n * M;
        const double m = *std::max_element(row, row + M);
        double s = 0.0;
        for (std::size_t k = 0; k < M; ++k) s += std::exp(row[k] - m);
        for (std::size_t k = 0; k < M; ++k) probs[n * M + k] = std::exp(row[k] - m) / s;
        total += std::log(s) - (row[labels[n]] - m);
    }
    std::vector<int> y(labels.begin(), labels.end());
    const std::size_t iz = logits.id();
    return logits.tape().record(
        "softmax_cross_entropy", {1}, {total / static_cast<double>(N)}, {iz},
        [=, probs = std::move(probs), y = std::move(y)](Tape& t, std::size_t self) {
            const double g = t.node(self).grad[0] / static_cast<double>(N);
            std::vector<double>& gz = t.grad_of(iz);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t k = 0; k < M; ++k) {
                    const double onehot = static_cast<int>(k) == y[n] ? 1.0 : 0.0;
                    gz[n * M + k] += g * (probs[n * M + k] - onehot);
                }
            }
        });
}

GradCheckReport grad_check(const ScalarFunction& f, const ParameterSet& params, const GradCheckOptions& opts) {
    if (!(opts.step > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");
    GradientMap analytic;
    {
        Tape tape;
        auto bound = tape.bind(params);
        Tensor loss = f(tape, bound);
        analytic = backward(loss);
    }
    auto evaluate = [&](const ParameterSet& p) {
        Tape tape;
        auto bound = tape.bind(p);
        return f(tape, bound).item();
    };
    GradCheckReport report;
    ParameterSet work = params;
    for (auto& [name, p] : work) {
        const auto& g = analytic.at(name).values;
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            const double orig = p.values[k];
            p.values[k] = orig + opts.step;
            const double fp = evaluate(work);
            p.values[k] = orig - opts.step;
            const double fm = evaluate(work);
            p.values[k] = orig;
            const double numeric = (fp - fm) / (2.0 * opts.step);
            const double a = g[k];
            if (std::abs(a) < opts.skip_below && std::abs(numeric) < opts.skip_below) continue;
            const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
            const double err = std::abs(a - numeric) / denom;
            ++report.checked;
            if (report.checked == 1 || err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = name;
                report.worst_index = k;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    return report;
}

std::size_t parameter_count(const ParameterSet& params) {
    std::size_t n = 0;
    for (const auto& [name, p] : params) n += p.values.size();
    return n;
}

}  // namespace physnet::ad
