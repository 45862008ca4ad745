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

#include "hierforecast/spline.hpp"

#include "hierforecast/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hierforecast::spline {

namespace {

constexpr int kDegree = 3;

// Uniform cubic B-spline on [0, 4) and its derivative.
double cardinal(double d) {
    if (d < 0.0 || d >= 4.0) return 0.0;
    if (d < 1.0) return d * d * d / 6.0;
    if (d < 2.0) return (-3.0 * d * d * d + 12.0 * d * d - 12.0 * d + 4.0) / 6.0;
    if (d < 3.0) return (3.0 * d * d * d - 24.0 * d * d + 60.0 * d - 44.0) / 6.0;
    const double e = 4.0 - d;
    return e * e * e / 6.0;
}

double cardinal_derivative(double d) {
    if (d < 0.0 || d >= 4.0) return 0.0;
    if (d < 1.0) return d * d / 2.0;
    if (d < 2.0) return (-3.0 * d * d + 8.0 * d - 4.0) / 2.0;
    if (d < 3.0) return (3.0 * d * d - 16.0 * d + 20.0) / 2.0;
    const double e = 4.0 - d;
    return -e * e / 2.0;
}

// Nonzero B-spline values of the given degree at x in knot span `span`
// (de Boor / Cox recursion). Output holds functions span-degree .. span.
void basis_funs(const std::vector<double>& knots, std::size_t span, double x, int degree,
                double* out) {
    double left[kDegree + 1];
    double right[kDegree + 1];
    out[0] = 1.0;
    for (int j = 1; j <= degree; ++j) {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        double saved = 0.0;
        for (int r = 0; r < j; ++r) {
            const double denom = right[r + 1] + left[j - r];
            const double temp = denom > 0.0 ? out[r] / denom : 0.0;
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

} // namespace

BSplineBasis BSplineBasis::open(double lo, double hi, std::vector<double> interior) {
    if (!(hi > lo)) {
        throw NumericalError("spline basis: degenerate range [" + std::to_string(lo) + ", " +
                             std::to_string(hi) + "]");
    }
    for (std::size_t i = 0; i < interior.size(); ++i) {
        if (!(interior[i] > lo && interior[i] < hi) || (i > 0 && !(interior[i] > interior[i - 1]))) {
            throw NumericalError("spline basis: interior knots must be strictly increasing inside the range");
        }
    }
    BSplineBasis b;
    b.cyclic_ = false;
    b.lo_ = lo;
    b.hi_ = hi;
    b.interior_ = std::move(interior);
    b.size_ = b.interior_.size() + kDegree + 1;
    b.knots_.assign(kDegree + 1, lo);
    b.knots_.insert(b.knots_.end(), b.interior_.begin(), b.interior_.end());
    b.knots_.insert(b.knots_.end(), kDegree + 1, hi);
    return b;
}

BSplineBasis BSplineBasis::periodic(double origin, double period, std::size_t size) {
    if (!(period > 0.0)) throw NumericalError("periodic spline basis: period must be positive");
    if (size < 4) throw NumericalError("periodic spline basis: needs at least 4 functions");
    BSplineBasis b;
    b.cyclic_ = true;
    b.lo_ = origin;
    b.hi_ = origin + period;
    b.size_ = size;
    return b;
}

std::size_t BSplineBasis::find_span(double x) const {
    const std::size_t last = size_ - 1;
    if (x >= hi_) return last;
    // first knot strictly greater than x, minus one
    auto it = std::upper_bound(knots_.begin() + kDegree, knots_.begin() + static_cast<long>(size_) + 1, x);
    const auto span = static_cast<std::size_t>(it - knots_.begin()) - 1;
    return std::clamp<std::size_t>(span, kDegree, last);
}

void BSplineBasis::evaluate_inside(double x, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    const std::size_t span = find_span(x);
    double n[kDegree + 1];
    basis_funs(knots_, span, x, kDegree, n);
    for (int r = 0; r <= kDegree; ++r) out[span - kDegree + r] = n[r];
}

void BSplineBasis::evaluate(double x, std::span<double> out) const {
    if (std::isnan(x)) {
        std::fill(out.begin(), out.end(), x);
        return;
    }
    if (cyclic_) {
        const double period = hi_ - lo_;
        const double h = period / static_cast<double>(size_);
        double u = std::fmod((x - lo_) / h, static_cast<double>(size_));
        if (u < 0.0) u += static_cast<double>(size_);
        const double k = static_cast<double>(size_);
        for (std::size_t j = 0; j < size_; ++j) {
            double d = u - static_cast<double>(j);
            if (d < 0.0) d += k;
            out[j] = cardinal(d);
        }
        return;
    }
    if (x < lo_ || x > hi_) {
        const double edge = x < lo_ ? lo_ : hi_;
        std::vector<double> slope(size_);
        evaluate_inside(edge, out);
        derivative(edge, slope);
        const double delta = x - edge;
        for (std::size_t j = 0; j < size_; ++j) out[j] += delta * slope[j];
        return;
    }
    evaluate_inside(x, out);
}

void BSplineBasis::derivative(double x, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    if (cyclic_) {
        const double period = hi_ - lo_;
        const double h = period / static_cast<double>(size_);
        const double k = static_cast<double>(size_);
        double u = std::fmod((x - lo_) / h, k);
        if (u < 0.0) u += k;
        for (std::size_t j = 0; j < size_; ++j) {
            double d = u - static_cast<double>(j);
            if (d < 0.0) d += k;
            out[j] = cardinal_derivative(d) / h;
        }
        return;
    }
    const double xc = std::clamp(x, lo_, hi_);
    const std::size_t span = find_span(xc);
    double n2[kDegree];
    basis_funs(knots_, span, xc, kDegree - 1, n2);
    // n2[r] is N_{span-2+r, 2}
    auto lower = [&](std::size_t i) -> double {
        if (i + 2 < span || i > span) return 0.0;
        return n2[i + 2 - span];
    };
    for (std::size_t i = span - kDegree; i <= span; ++i) {
        double value = 0.0;
        const double d1 = knots_[i + kDegree] - knots_[i];
        const double d2 = knots_[i + kDegree + 1] - knots_[i + 1];
        if (d1 > 0.0) value += lower(i) / d1;
        if (d2 > 0.0) value -= lower(i + 1) / d2;
        out[i] = kDegree * value;
    }
}

std::vector<double> BSplineBasis::greville() const {
    std::vector<double> g(size_);
    if (cyclic_) {
        const double h = (hi_ - lo_) / static_cast<double>(size_);
        for (std::size_t j = 0; j < size_; ++j) g[j] = lo_ + (static_cast<double>(j) + 2.0) * h;
        return g;
    }
    for (std::size_t i = 0; i < size_; ++i) {
        g[i] = (knots_[i + 1] + knots_[i + 2] + knots_[i + 3]) / 3.0;
    }
    return g;
}

Eigen::MatrixXd BSplineBasis::penalty() const {
    const auto k = static_cast<Eigen::Index>(size_);
    if (cyclic_) {
        Eigen::MatrixXd d = Eigen::MatrixXd::Zero(k, k);
        for (Eigen::Index i = 0; i < k; ++i) {
            d(i, (i + k - 1) % k) += 1.0;
            d(i, i) -= 2.0;
            d(i, (i + 1) % k) += 1.0;
        }
        return d.transpose() * d;
    }
    const auto g = greville();
    const double mean_gap = (g.back() - g.front()) / static_cast<double>(size_ - 1);
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(k - 2, k);
    for (Eigen::Index i = 1; i + 1 < k; ++i) {
        const double a = mean_gap / (g[i] - g[i - 1]);
        const double c = mean_gap / (g[i + 1] - g[i]);
        d(i - 1, i - 1) = a;
        d(i - 1, i) = -(a + c);
        d(i - 1, i + 1) = c;
    }
    return d.transpose() * d;
}

std::size_t distinct_count(std::span<const double> values) {
    std::vector<double> v;
    v.reserve(values.size());
    for (double x : values) {
        if (std::isfinite(x)) v.push_back(x);
    }
    std::sort(v.begin(), v.end());
    return static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
}

std::vector<double> quantile_knots(std::span<const double> values, std::size_t count) {
    std::vector<double> u(values.begin(), values.end());
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    if (u.size() < 2) throw NumericalError("quantile knots: covariate is constant");
    std::vector<double> knots;
    knots.reserve(count);
    const double last = static_cast<double>(u.size() - 1);
    for (std::size_t i = 1; i <= count; ++i) {
        const double pos = last * static_cast<double>(i) / static_cast<double>(count + 1);
        const auto base = static_cast<std::size_t>(std::floor(pos));
        const double frac = pos - static_cast<double>(base);
        const double value = base + 1 < u.size() ? u[base] + frac * (u[base + 1] - u[base]) : u[base];
        knots.push_back(value);
    }
    // collapse any knot that touches the boundary or its predecessor
    std::vector<double> cleaned;
    for (double k : knots) {
        if (k > u.front() && k < u.back() && (cleaned.empty() || k > cleaned.back())) cleaned.push_back(k);
    }
    return cleaned;
}

} // namespace hierforecast::spline
