#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace physnet::grid {

/// A scalar field on a uniform 2D grid, stored row-major.
///
/// Rows and columns must both be at least 3 so that every point has a
/// five-point neighbourhood after replicate padding. Spacing is strictly
/// positive. Values are checked for finiteness at construction; mutable
/// access is allowed, so the operators below re-check on entry.
class GridField {
public:
    GridField(std::size_t rows, std::size_t cols, double spacing = 1.0, double fill = 0.0);
    GridField(std::size_t rows, std::size_t cols, double spacing, std::vector<double> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return values_.size(); }
    double spacing() const { return spacing_; }

    double& operator()(std::size_t i, std::size_t j) { return values_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return values_[i * cols_ + j]; }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    bool same_layout(const GridField& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && spacing_ == other.spacing_;
    }

    /// Throws std::invalid_argument naming the first non-finite index.
    void require_finite(const char* context) const;

private:
    std::size_t rows_;
    std::size_t cols_;
    double spacing_;
    std::vector<double> values_;
};

struct BoundaryMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<bool> mask;
    double threshold_used = 0.0;

    std::size_t count() const;
    bool operator()(std::size_t i, std::size_t j) const { return mask[i * cols + j]; }
};

/// Five-point Laplacian with replicate padding (zero-flux edges).
GridField laplacian_5pt(const GridField& field);

/// |grad u|: central differences inside, one-sided differences on the edges.
GridField gradient_magnitude(const GridField& field);

/// Marks points whose gradient magnitude is strictly above the given
/// quantile of the field's own gradient-magnitude distribution.
///
/// The quantile is the lower (inverted-CDF) order statistic, so the mask
/// never holds more than (1 - quantile) * size points plus ties.
BoundaryMask detect_boundary(const GridField& field, double quantile);

/// D * lap(u) + rho * u * (1 - u / K). All three parameters must be > 0.
GridField fisher_kpp_rhs(const GridField& u, double D, double rho, double K);

/// dudt - fisher_kpp_rhs(u, D, rho, K).
GridField pde_residual(const GridField& u, const GridField& dudt, double D, double rho, double K);

/// Inverted-CDF quantile of a sample (the smallest value v with
/// P(X <= v) >= q). Input need not be sorted.
double lower_quantile(std::vector<double> samples, double q);

}  // namespace physnet::grid
