/*
    Licensed under the Apache License, Version 2.0 (the "License");
    you may not use this file except in compliance with the License.
    You may obtain a copy of the License at

        https://www.apache.org/licenses/LICENSE-2.0

    Unless required by applicable law or agreed to in writing, software
    distributed under the License is distributed on an "AS IS" BASIS,
    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
    See the License for the specific language governing permissions and
    limitations under the License.
*/

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

namespace hierforecast::spline {

/// Cubic B-spline basis, either clamped on [lo, hi] with arbitrary interior
/// knots, or periodic with equally spaced knots over one period.
///
/// Open bases extend linearly outside [lo, hi] along the boundary tangent:
/// the row returned for x > hi is B(hi) + (x - hi) B'(hi). Rows always sum
/// to one, including in the extrapolation region.
class BSplineBasis {
public:
    BSplineBasis() = default;

    static BSplineBasis open(double lo, double hi, std::vector<double> interior);
    static BSplineBasis periodic(double origin, double period, std::size_t size);

    std::size_t size() const noexcept { return size_; }
    bool cyclic() const noexcept { return cyclic_; }
    double lo() const noexcept { return lo_; }
    double hi() const noexcept { return hi_; }
    const std::vector<double>& interior() const noexcept { return interior_; }

    /// Writes size() basis values at x into out.
    void evaluate(double x, std::span<double> out) const;
    /// First derivative of each basis function at x (inside the domain).
    void derivative(double x, std::span<double> out) const;

    /// Greville abscissae: coefficient vector c_i = a + b*g_i reproduces a + b*x.
    std::vector<double> greville() const;

    /// Second-order difference penalty S = D^T D. For open bases the
    /// differences are divided by Greville spacings so the null space is
    /// exactly the set of straight lines in x; periodic bases use the
    /// circulant second difference (null space: constants).
    Eigen::MatrixXd penalty() const;

private:
    void evaluate_inside(double x, std::span<double> out) const;
    std::size_t find_span(double x) const;

    bool cyclic_ = false;
    double lo_ = 0.0;
    double hi_ = 1.0;
    std::size_t size_ = 0;
    std::vector<double> interior_;
    std::vector<double> knots_; // full clamped knot vector (open bases)
};

/// Interior knots at evenly spaced quantiles of the distinct values.
/// Returns `count` strictly increasing knots in (min, max).
std::vector<double> quantile_knots(std::span<const double> values, std::size_t count);

/// Number of distinct finite values.
std::size_t distinct_count(std::span<const double> values);

} // namespace hierforecast::spline
