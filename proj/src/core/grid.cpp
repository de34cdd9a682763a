#include "physnet/grid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace physnet::grid {

namespace {

void check_shape(std::size_t rows, std::size_t cols, double spacing) {
    if (rows < 3 || cols < 3) {
        std::ostringstream os;
        os << "GridField needs at least 3x3 points, got " << rows << "x" << cols;
        throw std::invalid_argument(os.str());
    }
    if (!(spacing > 0.0) || !std::isfinite(spacing)) {
        throw std::invalid_argument("GridField spacing must be finite and > 0");
    }
}

void check_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
        std::ostringstream os;
        os << "fisher_kpp_rhs: parameter " << name << " must be > 0, got " << v;
        throw std::invalid_argument(os.str());
    }
}

}  // namespace

GridField::GridField(std::size_t rows, std::size_t cols, double spacing, double fill)
    : rows_(rows), cols_(cols), spacing_(spacing) {
    check_shape(rows, cols, spacing);
    if (!std::isfinite(fill)) throw std::invalid_argument("GridField fill value must be finite");
    values_.assign(rows * cols, fill);
}

GridField::GridField(std::size_t rows, std::size_t cols, double spacing, std::vector<double> values)
    : rows_(rows), cols_(cols), spacing_(spacing), values_(std::move(values)) {
    check_shape(rows, cols, spacing);
    if (values_.size() != rows * cols) {
        std::ostringstream os;
        os << "GridField expects " << rows * cols << " values, got " << values_.size();
        throw std::invalid_argument(os.str());
    }
    require_finite("GridField");
}

void GridField::require_finite(const char* context) const {
    for (std::size_t k = 0; k < values_.size(); ++k) {
        if (!std::isfinite(values_[k])) {
            std::ostringstream os;
            os << context << ": non-finite value " << values_[k] << " at index (" << k / cols_ << ", "
               << k % cols_ << ")";
            throw std::invalid_argument(os.str());
        }
    }
}

std::size_t BoundaryMask::count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

GridField laplacian_5pt(const GridField& field) {
    field.require_finite("laplacian_5pt");
    const std::size_t H = field.rows();
    const std::size_t W = field.cols();
    const double h2 = field.spacing() * field.spacing();
    GridField out(H, W, field.spacing());
    for (std::size_t i = 0; i < H; ++i) {
        const std::size_t up = i == 0 ? 0 : i - 1;
        const std::size_t down = i + 1 == H ? i : i + 1;
        for (std::size_t j = 0; j < W; ++j) {
            const std::size_t left = j == 0 ? 0 : j - 1;
            const std::size_t right = j + 1 == W ? j : j + 1;
            const double sum = field(down, j) + field(up, j) + field(i, right) + field(i, left);
            out(i, j) = (sum - 4.0 * field(i, j)) / h2;
        }
    }
    return out;
}

GridField gradient_magnitude(const GridField& field) {
    field.require_finite("gradient_magnitude");
    const std::size_t H = field.rows();
    const std::size_t W = field.cols();
    const double h = field.spacing();
    GridField out(H, W, h);
    for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
            double gi;
            if (i == 0) {
                gi = (field(1, j) - field(0, j)) / h;
            } else if (i + 1 == H) {
                gi = (field(i, j) - field(i - 1, j)) / h;
            } else {
                gi = (field(i + 1, j) - field(i - 1, j)) / (2.0 * h);
            }
            double gj;
            if (j == 0) {
                gj = (field(i, 1) - field(i, 0)) / h;
            } else if (j + 1 == W) {
                gj = (field(i, j) - field(i, j - 1)) / h;
            } else {
                gj = (field(i, j + 1) - field(i, j - 1)) / (2.0 * h);
            }
            out(i, j) = std::sqrt(gi * gi + gj * gj);
        }
    }
    return out;
}

double lower_quantile(std::vector<double> samples, double q) {
    if (samples.empty()) throw std::invalid_argument("lower_quantile: empty sample");
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("lower_quantile: q must be in (0, 1)");
    const auto n = samples.size();
    auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    auto nth = samples.begin() + static_cast<std::ptrdiff_t>(rank - 1);
    std::nth_element(samples.begin(), nth, samples.end());
    return *nth;
}

BoundaryMask detect_boundary(const GridField& field, double quantile) {
    if (!(quantile > 0.0 && quantile < 1.0)) {
        throw std::invalid_argument("detect_boundary: quantile must be in (0, 1)");
    }
    const GridField g = gradient_magnitude(field);
    BoundaryMask out;
    out.rows = field.rows();
    out.cols = field.cols();
    out.mask.assign(g.size(), false);
    const auto gv = g.values();
    const double top = *std::max_element(gv.begin(), gv.end());
    if (top == 0.0) return out;
    out.threshold_used = lower_quantile({gv.begin(), gv.end()}, quantile);
    for (std::size_t k = 0; k < gv.size(); ++k) out.mask[k] = gv[k] > out.threshold_used;
    return out;
}

GridField fisher_kpp_rhs(const GridField& u, double D, double rho, double K) {
    check_positive(D, "D");
    check_positive(rho, "rho");
    check_positive(K, "K");
    GridField out = laplacian_5pt(u);
    auto o = out.values();
    const auto v = u.values();
    for (std::size_t k = 0; k < o.size(); ++k) {
        // Operation order is mirrored by the differentiable residual so that
        // consistent pairs cancel exactly.
        o[k] = D * o[k] + rho * (v[k] * (1.0 - v[k] / K));
    }
    return out;
}

GridField pde_residual(const GridField& u, const GridField& dudt, double D, double rho, double K) {
    if (!u.same_layout(dudt)) {
        std::ostringstream os;
        os << "pde_residual: shape mismatch u " << u.rows() << "x" << u.cols() << " vs dudt " << dudt.rows()
           << "x" << dudt.cols();
        throw std::invalid_argument(os.str());
    }
    dudt.require_finite("pde_residual");
    GridField out = fisher_kpp_rhs(u, D, rho, K);
    auto o = out.values();
    const auto d = dudt.values();
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = d[k] - o[k];
    return out;
}

}  // namespace physnet::grid
