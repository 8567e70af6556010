#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "kcd/error.hpp"

namespace kcd {

/// Uniform B-spline grid: G intervals over [lo, hi] with `degree` extra knots
/// replicated at the same spacing beyond each end, so knot i sits at
/// lo + (i - degree) * step for i in [0, G + 2*degree].
struct SplineGrid {
    double lo = -1.0;
    double hi = 1.0;
    int intervals = 5;
    int degree = 3;

    static constexpr int max_degree = 8;

    void validate() const {
        if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
            fail(ErrorKind::config, "spline grid needs lo < hi, got [" + std::to_string(lo) + ", " +
                                        std::to_string(hi) + "]");
        }
        if (intervals <= 0) fail(ErrorKind::config, "spline grid needs at least one interval");
        if (degree < 0 || degree > max_degree) {
            fail(ErrorKind::config, "spline degree must be in [0, " + std::to_string(max_degree) + "]");
        }
    }

    int basis_count() const { return intervals + degree; }
    int knot_count() const { return intervals + 2 * degree + 1; }
    double step() const { return (hi - lo) / intervals; }
    double knot(int i) const {
        if (i == degree) return lo;
        if (i == intervals + degree) return hi;
        return lo + (i - degree) * step();
    }

    std::vector<double> knots() const {
        std::vector<double> t(static_cast<std::size_t>(knot_count()));
        for (int i = 0; i < knot_count(); ++i) t[static_cast<std::size_t>(i)] = knot(i);
        return t;
    }

    bool operator==(const SplineGrid&) const = default;
};

/// The non-zero window of the basis at one point: functions
/// first .. first + degree carry `value`, and `slope` holds their derivatives
/// with respect to the (unclamped) input, zero when the input was clamped.
template <typename Scalar>
struct BasisWindow {
    int first = 0;
    bool clamped = false;
    std::array<Scalar, SplineGrid::max_degree + 1> value{};
    std::array<Scalar, SplineGrid::max_degree + 1> slope{};
};

/// Evaluates the degree+1 basis functions that are non-zero at x, with the
/// triangular Cox-de Boor scheme. Inputs outside [lo, hi] are clamped first.
/// The last interval is closed so x == hi stays inside the grid.
template <typename Scalar>
BasisWindow<Scalar> bspline_window(const SplineGrid& grid, Scalar x) {
    BasisWindow<Scalar> w;
    const int p = grid.degree;
    const Scalar lo = static_cast<Scalar>(grid.lo);
    const Scalar hi = static_cast<Scalar>(grid.hi);
    if (x < lo || x > hi) w.clamped = true;
    x = std::clamp(x, lo, hi);

    const Scalar h = static_cast<Scalar>(grid.step());
    int span = p + static_cast<int>(std::floor((x - lo) / h));
    span = std::clamp(span, p, grid.intervals + p - 1);
    // Settle floor() round-off against the actual knot positions.
    while (span < grid.intervals + p - 1 && x >= static_cast<Scalar>(grid.knot(span + 1))) ++span;
    while (span > p && x < static_cast<Scalar>(grid.knot(span))) --span;
    w.first = span - p;

    std::array<Scalar, SplineGrid::max_degree + 1> left{};
    std::array<Scalar, SplineGrid::max_degree + 1> right{};
    std::array<Scalar, SplineGrid::max_degree + 1> lower{};  // degree p - 1 row
    auto& n = w.value;
    n[0] = Scalar(1);
    for (int j = 1; j <= p; ++j) {
        if (j == p) std::copy(n.begin(), n.begin() + p, lower.begin());
        left[j] = x - static_cast<Scalar>(grid.knot(span + 1 - j));
        right[j] = static_cast<Scalar>(grid.knot(span + j)) - x;
        Scalar saved = Scalar(0);
        for (int r = 0; r < j; ++r) {
            const Scalar temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }

    // Uniform knots: B'_{i,p} = (B_{i,p-1} - B_{i+1,p-1}) / h. The degree
    // p - 1 window covers functions first + 1 .. first + p.
    if (p > 0 && !w.clamped) {
        for (int r = 0; r <= p; ++r) {
            const Scalar a = (r >= 1) ? lower[r - 1] : Scalar(0);
            const Scalar b = (r < p) ? lower[r] : Scalar(0);
            w.slope[r] = (a - b) / h;
        }
    }
    return w;
}

/// All basis_count() values at x (mostly zeros).
template <typename Scalar>
std::vector<Scalar> bspline_row(const SplineGrid& grid, Scalar x) {
    std::vector<Scalar> row(static_cast<std::size_t>(grid.basis_count()), Scalar(0));
    const auto w = bspline_window(grid, x);
    for (int r = 0; r <= grid.degree; ++r) {
        row[static_cast<std::size_t>(w.first + r)] = w.value[r];
    }
    return row;
}

}  // namespace kcd
