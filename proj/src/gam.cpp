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

#include "hierforecast/gam.hpp"

#include "hierforecast/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace hierforecast::gam {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Formula

std::string TermSpec::label() const {
    switch (kind) {
    case TermKind::Categorical:
    case TermKind::Linear: return covariates.at(0);
    case TermKind::LinearByFactor: return covariates.at(0) + ":" + by;
    case TermKind::Smooth: return "s(" + covariates.at(0) + ")" + (by.empty() ? "" : ":" + by);
    case TermKind::Tensor: return "te(" + covariates.at(0) + ":" + covariates.at(1) + ")";
    }
    return {};
}

std::vector<std::string> TermSpec::inputs() const {
    std::vector<std::string> in = covariates;
    if (!by.empty()) in.push_back(by);
    return in;
}

std::string to_string(const TermSpec& t) {
    std::ostringstream out;
    switch (t.kind) {
    case TermKind::Categorical: out << "cat(" << t.covariates[0] << ")"; break;
    case TermKind::Linear: out << "lin(" << t.covariates[0] << ")"; break;
    case TermKind::LinearByFactor: out << "lin(" << t.covariates[0] << "):cat(" << t.by << ")"; break;
    case TermKind::Smooth:
        out << "s(" << t.covariates[0] << ", k=" << t.k.at(0);
        if (t.cyclic) out << ", cyclic";
        if (t.period > 0.0) {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", t.period);
            out << ", period=" << buf;
        }
        if (!t.by.empty()) out << ", by=" << t.by;
        out << ")";
        break;
    case TermKind::Tensor:
        out << "te(" << t.covariates[0] << ", " << t.covariates[1] << ", k=" << t.k.at(0) << ", " << t.k.at(1) << ")";
        break;
    }
    return out.str();
}

std::string to_string(const Formula& f) {
    std::string s = f.response + " ~ ";
    if (f.terms.empty()) s += "1";
    for (std::size_t i = 0; i < f.terms.size(); ++i) {
        if (i) s += " + ";
        s += to_string(f.terms[i]);
    }
    return s;
}

namespace {

std::string strip(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

bool valid_name(const std::string& s) {
    if (s.empty()) return false;
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) || c == '_' || c == '.'; });
}

std::vector<std::string> split_top(const std::string& s, char sep) {
    std::vector<std::string> parts;
    int depth = 0;
    std::string cur;
    for (char c : s) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (c == sep && depth == 0) {
            parts.push_back(strip(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(strip(cur));
    return parts;
}

// "name(args)" -> {name, args}
bool call_syntax(const std::string& s, std::string& fn, std::string& args) {
    const auto open = s.find('(');
    if (open == std::string::npos || s.back() != ')') return false;
    fn = strip(s.substr(0, open));
    args = s.substr(open + 1, s.size() - open - 2);
    return true;
}

std::string bad_term(const std::string& term, const std::string& why) {
    return "formula: cannot parse term '" + term + "': " + why +
           " (expected cat(X), lin(X), lin(X):cat(F), s(X, k=INT[, cyclic][, by=F]) or te(X1, X2, k=INT, INT))";
}

std::size_t parse_k(const std::string& text, const std::string& term) {
    try {
        std::size_t used = 0;
        const long v = std::stol(text, &used);
        if (used != text.size() || v < 1) throw std::invalid_argument("k");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ConfigError(bad_term(term, "invalid basis size '" + text + "'"));
    }
}

TermSpec parse_term(const std::string& term) {
    std::string fn, args;
    const auto colon_parts = split_top(term, ':');
    if (colon_parts.size() == 2) {
        std::string fn2, args2;
        if (!call_syntax(colon_parts[0], fn, args) || !call_syntax(colon_parts[1], fn2, args2) || fn != "lin" ||
            fn2 != "cat") {
            throw ConfigError(bad_term(term, "only lin(X):cat(F) interactions are supported"));
        }
        TermSpec t;
        t.kind = TermKind::LinearByFactor;
        t.covariates = {strip(args)};
        t.by = strip(args2);
        if (!valid_name(t.covariates[0]) || !valid_name(t.by)) throw ConfigError(bad_term(term, "invalid name"));
        return t;
    }
    if (colon_parts.size() != 1 || !call_syntax(term, fn, args)) throw ConfigError(bad_term(term, "unknown token"));
    const auto parts = split_top(args, ',');
    TermSpec t;
    if (fn == "cat" || fn == "lin") {
        if (parts.size() != 1 || !valid_name(parts[0])) throw ConfigError(bad_term(term, "expects one covariate"));
        t.kind = fn == "cat" ? TermKind::Categorical : TermKind::Linear;
        t.covariates = {parts[0]};
        return t;
    }
    if (fn == "s") {
        t.kind = TermKind::Smooth;
        if (parts.empty() || !valid_name(parts[0])) throw ConfigError(bad_term(term, "missing covariate"));
        t.covariates = {parts[0]};
        t.k = {10};
        for (std::size_t i = 1; i < parts.size(); ++i) {
            const auto& p = parts[i];
            if (p == "cyclic") {
                t.cyclic = true;
            } else if (p.rfind("k=", 0) == 0 || p.rfind("k =", 0) == 0) {
                t.k = {parse_k(strip(p.substr(p.find('=') + 1)), term)};
            } else if (p.rfind("by", 0) == 0 && p.find('=') != std::string::npos) {
                t.by = strip(p.substr(p.find('=') + 1));
                if (!valid_name(t.by)) throw ConfigError(bad_term(term, "invalid by factor"));
            } else if (p.rfind("period", 0) == 0 && p.find('=') != std::string::npos) {
                try {
                    t.period = std::stod(strip(p.substr(p.find('=') + 1)));
                } catch (const std::exception&) {
                    throw ConfigError(bad_term(term, "invalid period"));
                }
                if (!(t.period > 0.0)) throw ConfigError(bad_term(term, "period must be positive"));
            } else {
                throw ConfigError(bad_term(term, "unknown option '" + p + "'"));
            }
        }
        return t;
    }
    if (fn == "te") {
        t.kind = TermKind::Tensor;
        if (parts.size() < 2 || !valid_name(parts[0]) || !valid_name(parts[1])) {
            throw ConfigError(bad_term(term, "te needs two covariates"));
        }
        t.covariates = {parts[0], parts[1]};
        t.k = {5, 5};
        if (parts.size() == 4 && parts[2].find('=') != std::string::npos) {
            t.k = {parse_k(strip(parts[2].substr(parts[2].find('=') + 1)), term), parse_k(parts[3], term)};
        } else if (parts.size() != 2) {
            throw ConfigError(bad_term(term, "te options must be 'k=INT, INT'"));
        }
        return t;
    }
    throw ConfigError(bad_term(term, "unknown term type '" + fn + "'"));
}

} // namespace

Formula parse_formula(const std::string& text) {
    const auto tilde = text.find('~');
    if (tilde == std::string::npos) throw ConfigError("formula '" + text + "': missing '~'");
    Formula f;
    f.response = strip(text.substr(0, tilde));
    if (!valid_name(f.response)) throw ConfigError("formula '" + text + "': invalid response name");
    const std::string rhs = strip(text.substr(tilde + 1));
    if (rhs.empty()) throw ConfigError("formula '" + text + "': empty right-hand side");
    if (rhs == "1") return f;
    for (const auto& term : split_top(rhs, '+')) {
        if (term.empty()) throw ConfigError("formula '" + text + "': empty term");
        f.terms.push_back(parse_term(term));
    }
    for (std::size_t i = 0; i < f.terms.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (f.terms[i].label() == f.terms[j].label()) {
                throw ConfigError("formula '" + text + "': duplicate term '" + f.terms[i].label() + "'");
            }
        }
    }
    return f;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

std::string numeric_label(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.15g", v);
    return buf;
}

std::string row_label(const Column& col, std::size_t row) {
    return col.categorical() ? col.label(row) : numeric_label(col.values[row]);
}

// Levels present in the frame, in declared order (categorical) or numeric order.
std::vector<std::string> present_levels(const SeriesFrame& frame, const std::string& name) {
    const Column& col = frame.column(name);
    if (col.categorical()) {
        std::vector<bool> seen(col.levels.size(), false);
        for (double v : col.values) seen[static_cast<std::size_t>(v)] = true;
        std::vector<std::string> out;
        for (std::size_t i = 0; i < seen.size(); ++i) {
            if (seen[i]) out.push_back(col.levels[i]);
        }
        return out;
    }
    std::vector<double> v(col.values.begin(), col.values.end());
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    std::vector<std::string> out;
    for (double x : v) out.push_back(numeric_label(x));
    return out;
}

std::vector<std::size_t> level_codes(const SeriesFrame& frame, const std::string& name,
                                     const std::vector<std::string>& levels) {
    const Column& col = frame.column(name);
    std::vector<std::size_t> codes(frame.size());
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < levels.size(); ++i) index[levels[i]] = i;
    for (std::size_t r = 0; r < frame.size(); ++r) {
        const auto label = row_label(col, r);
        const auto it = index.find(label);
        if (it == index.end()) {
            throw DataError("unseen categorical level '" + label + "' for covariate '" + name + "'");
        }
        codes[r] = it->second;
    }
    return codes;
}

std::span<const double> numeric_values(const SeriesFrame& frame, const std::string& name) {
    if (frame.has(name) && frame.column(name).categorical()) {
        throw ConfigError("covariate '" + name + "' is categorical but used as numeric");
    }
    return frame.values(name);
}

double default_period(const TermSpec& spec) {
    if (spec.period > 0.0) return spec.period;
    const auto& name = spec.covariates[0];
    if (name == "Instant") return 48.0;
    if (name == "ToY") return 1.0;
    throw ConfigError("cyclic smooth on '" + name + "' requires a declared period (s(" + name +
                      ", k=.., cyclic, period=P))");
}

spline::BSplineBasis make_marginal(std::span<const double> x, std::size_t& k, bool cyclic, double period,
                                   const std::string& name, std::vector<std::string>& warnings) {
    const std::size_t distinct = spline::distinct_count(x);
    if (distinct < 2) throw NumericalError("covariate '" + name + "' is constant; cannot build a smooth basis");
    if (k < 4) throw ConfigError("smooth on '" + name + "': basis size must be at least 4 for cubic splines");
    if (distinct < k) {
        const std::size_t reduced = std::max<std::size_t>(4, distinct);
        warnings.push_back("smooth on '" + name + "': only " + std::to_string(distinct) + " distinct values, k reduced from " +
                           std::to_string(k) + " to " + std::to_string(reduced));
        k = reduced;
    }
    if (cyclic) return spline::BSplineBasis::periodic(0.0, period, k);
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    auto knots = spline::quantile_knots(x, k - 4);
    if (knots.size() + 4 != k) {
        warnings.push_back("smooth on '" + name + "': duplicate quantile knots removed, k = " +
                           std::to_string(knots.size() + 4));
        k = knots.size() + 4;
    }
    return spline::BSplineBasis::open(*mn, *mx, std::move(knots));
}

} // namespace

// ---------------------------------------------------------------------------
// Basis construction

BasisBlock build_basis(const TermSpec& spec, const SeriesFrame& frame, FittedTerm* out) {
    FittedTerm local;
    FittedTerm& ft = out ? *out : local;
    ft.spec = spec;
    BasisBlock block;
    const auto n = static_cast<Index>(frame.size());

    switch (spec.kind) {
    case TermKind::Categorical: {
        ft.levels = present_levels(frame, spec.covariates[0]);
        const auto codes = level_codes(frame, spec.covariates[0], ft.levels);
        block.design = MatrixXd::Zero(n, static_cast<Index>(ft.levels.size()));
        for (Index r = 0; r < n; ++r) block.design(r, static_cast<Index>(codes[r])) = 1.0;
        break;
    }
    case TermKind::Linear: {
        const auto x = numeric_values(frame, spec.covariates[0]);
        block.design = Eigen::Map<const VectorXd>(x.data(), n);
        const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
        ft.ranges = {{*mn, *mx}};
        break;
    }
    case TermKind::LinearByFactor: {
        const auto x = numeric_values(frame, spec.covariates[0]);
        ft.levels = present_levels(frame, spec.by);
        const auto codes = level_codes(frame, spec.by, ft.levels);
        block.design = MatrixXd::Zero(n, static_cast<Index>(ft.levels.size()));
        for (Index r = 0; r < n; ++r) block.design(r, static_cast<Index>(codes[r])) = x[r];
        const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
        ft.ranges = {{*mn, *mx}};
        break;
    }
    case TermKind::Smooth: {
        const auto x = numeric_values(frame, spec.covariates[0]);
        std::size_t k = spec.k.at(0);
        const double period = spec.cyclic ? default_period(spec) : 0.0;
        ft.bases = {make_marginal(x, k, spec.cyclic, period, spec.covariates[0], block.warnings)};
        ft.spec.k = {k};
        if (spec.cyclic) ft.spec.period = period;
        const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
        ft.ranges = {{*mn, *mx}};
        const auto kk = static_cast<Index>(k);
        std::vector<std::size_t> codes(frame.size(), 0);
        std::size_t copies = 1;
        if (!spec.by.empty()) {
            ft.levels = present_levels(frame, spec.by);
            codes = level_codes(frame, spec.by, ft.levels);
            copies = ft.levels.size();
        }
        block.design = MatrixXd::Zero(n, kk * static_cast<Index>(copies));
        std::vector<double> row(k);
        for (Index r = 0; r < n; ++r) {
            ft.bases[0].evaluate(x[r], row);
            const Index offset = kk * static_cast<Index>(codes[r]);
            for (Index j = 0; j < kk; ++j) block.design(r, offset + j) = row[j];
        }
        block.penalty = ft.bases[0].penalty();
        break;
    }
    case TermKind::Tensor: {
        const auto x1 = numeric_values(frame, spec.covariates[0]);
        const auto x2 = numeric_values(frame, spec.covariates[1]);
        std::size_t k1 = spec.k.at(0);
        std::size_t k2 = spec.k.at(1);
        ft.bases = {make_marginal(x1, k1, false, 0.0, spec.covariates[0], block.warnings),
                    make_marginal(x2, k2, false, 0.0, spec.covariates[1], block.warnings)};
        ft.spec.k = {k1, k2};
        const auto [mn1, mx1] = std::minmax_element(x1.begin(), x1.end());
        const auto [mn2, mx2] = std::minmax_element(x2.begin(), x2.end());
        ft.ranges = {{*mn1, *mx1}, {*mn2, *mx2}};
        block.design = MatrixXd::Zero(n, static_cast<Index>(k1 * k2));
        std::vector<double> r1(k1), r2(k2);
        for (Index r = 0; r < n; ++r) {
            ft.bases[0].evaluate(x1[r], r1);
            ft.bases[1].evaluate(x2[r], r2);
            for (std::size_t i = 0; i < k1; ++i) {
                for (std::size_t j = 0; j < k2; ++j) block.design(r, static_cast<Index>(i * k2 + j)) = r1[i] * r2[j];
            }
        }
        const MatrixXd s1 = ft.bases[0].penalty();
        const MatrixXd s2 = ft.bases[1].penalty();
        const auto i1 = MatrixXd::Identity(static_cast<Index>(k1), static_cast<Index>(k1));
        const auto i2 = MatrixXd::Identity(static_cast<Index>(k2), static_cast<Index>(k2));
        MatrixXd s = MatrixXd::Zero(static_cast<Index>(k1 * k2), static_cast<Index>(k1 * k2));
        for (Index a = 0; a < static_cast<Index>(k1); ++a) {
            for (Index b = 0; b < static_cast<Index>(k1); ++b) {
                s.block(a * static_cast<Index>(k2), b * static_cast<Index>(k2), static_cast<Index>(k2), static_cast<Index>(k2)) =
                    s1(a, b) * i2 + i1(a, b) * s2;
            }
        }
        block.penalty = std::move(s);
        break;
    }
    }
    return block;
}

// ---------------------------------------------------------------------------
// Term evaluation

double FittedTerm::evaluate_at(std::span<const double> x, std::size_t copy) const {
    switch (spec.kind) {
    case TermKind::Categorical: return coefficients.at(0).at(static_cast<std::size_t>(x[0]));
    case TermKind::Linear: return coefficients.at(0).at(0) * (x[0] - centers.at(0));
    case TermKind::LinearByFactor: {
        double v = coefficients.at(copy).at(0) * x[0];
        for (std::size_t l = 0; l < levels.size(); ++l) v -= coefficients[l][0] * centers[l];
        return v;
    }
    case TermKind::Smooth: {
        const auto& theta = coefficients.at(copy);
        std::vector<double> row(bases[0].size());
        bases[0].evaluate(x[0], row);
        double v = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) v += row[j] * theta[j];
        return v;
    }
    case TermKind::Tensor: {
        const auto& theta = coefficients.at(0);
        const std::size_t k1 = bases[0].size(), k2 = bases[1].size();
        std::vector<double> r1(k1), r2(k2);
        bases[0].evaluate(x[0], r1);
        bases[1].evaluate(x[1], r2);
        double v = 0.0;
        for (std::size_t i = 0; i < k1; ++i) {
            double inner = 0.0;
            for (std::size_t j = 0; j < k2; ++j) inner += r2[j] * theta[i * k2 + j];
            v += r1[i] * inner;
        }
        return v;
    }
    }
    return 0.0;
}

std::vector<double> FittedTerm::contribution(const SeriesFrame& frame) const {
    const std::size_t n = frame.size();
    std::vector<double> out(n, 0.0);
    switch (spec.kind) {
    case TermKind::Categorical: {
        const auto codes = level_codes(frame, spec.covariates[0], levels);
        for (std::size_t r = 0; r < n; ++r) out[r] = coefficients[0][codes[r]];
        return out;
    }
    case TermKind::Linear: {
        const auto x = numeric_values(frame, spec.covariates[0]);
        for (std::size_t r = 0; r < n; ++r) {
            double xr = x[r];
            out[r] = evaluate_at(std::span<const double>(&xr, 1));
        }
        return out;
    }
    case TermKind::LinearByFactor: {
        const auto x = numeric_values(frame, spec.covariates[0]);
        const auto codes = level_codes(frame, spec.by, levels);
        for (std::size_t r = 0; r < n; ++r) {
            double xr = x[r];
            out[r] = evaluate_at(std::span<const double>(&xr, 1), codes[r]);
        }
        return out;
    }
    case TermKind::Smooth: {
        const auto x = numeric_values(frame, spec.covariates[0]);
        std::vector<std::size_t> codes(n, 0);
        if (!spec.by.empty()) codes = level_codes(frame, spec.by, levels);
        for (std::size_t r = 0; r < n; ++r) {
            double xr = x[r];
            out[r] = evaluate_at(std::span<const double>(&xr, 1), codes[r]);
        }
        return out;
    }
    case TermKind::Tensor: {
        const auto x1 = numeric_values(frame, spec.covariates[0]);
        const auto x2 = numeric_values(frame, spec.covariates[1]);
        for (std::size_t r = 0; r < n; ++r) {
            const double xr[2] = {x1[r], x2[r]};
            out[r] = evaluate_at(xr);
        }
        return out;
    }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

// One term's columns in the reduced (centred, gauge-fixed) design.
struct DesignBlock {
    std::size_t term = 0;
    Index start = 0;
    Index width = 0;
    std::size_t copies = 1;
    Index raw_per_copy = 0;     // columns per copy before the gauge drop
    bool drops_last = false;    // shift-invariant block: last column of each copy removed
    std::vector<std::vector<double>> means; // per copy, per raw column
    MatrixXd penalty;           // width x width, unscaled; empty if unpenalized
};

struct Solution {
    VectorXd theta;
    double rss = 0.0;
    double edf = 0.0; // excluding intercept
    double gcv = std::numeric_limits<double>::infinity();
    std::vector<double> term_edf;
    bool ok = false;
    double rcond = 0.0;
};

class PenalizedSystem {
public:
    PenalizedSystem(MatrixXd xtx, VectorXd xty, double yty, std::size_t n, std::vector<DesignBlock> blocks)
        : xtx_(std::move(xtx)), xty_(std::move(xty)), yty_(yty), n_(n), blocks_(std::move(blocks)) {}

    Index size() const { return xtx_.rows(); }
    const std::vector<DesignBlock>& blocks() const { return blocks_; }
    std::vector<DesignBlock>& blocks() { return blocks_; }

    MatrixXd system(const std::vector<double>& lambda) const {
        MatrixXd a = xtx_;
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const auto& blk = blocks_[b];
            if (blk.penalty.size() == 0 || lambda[b] == 0.0) continue;
            a.block(blk.start, blk.start, blk.width, blk.width) += lambda[b] * scale_[b] * blk.penalty;
        }
        return a;
    }

    void compute_scales() {
        scale_.assign(blocks_.size(), 1.0);
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const auto& blk = blocks_[b];
            if (blk.penalty.size() == 0) continue;
            const double sn = blk.penalty.norm();
            const double xn = xtx_.block(blk.start, blk.start, blk.width, blk.width).norm();
            if (sn > 0.0 && xn > 0.0) scale_[b] = xn / sn;
        }
    }
    double scale(std::size_t b) const { return scale_[b]; }

    Solution solve(const std::vector<double>& lambda, bool need_edf = true) const {
        Solution sol;
        const Index p = size();
        if (p == 0) {
            sol.theta = VectorXd();
            sol.rss = yty_;
            sol.ok = true;
            sol.gcv = gcv_of(sol.rss, 0.0);
            return sol;
        }
        const MatrixXd a = system(lambda);
        Eigen::LLT<MatrixXd> llt(a);
        if (llt.info() != Eigen::Success) return sol;
        sol.rcond = llt.rcond();
        if (!(sol.rcond > 1e-14)) return sol;
        sol.theta = llt.solve(xty_);
        sol.rss = std::max(0.0, yty_ - 2.0 * sol.theta.dot(xty_) + sol.theta.dot(xtx_ * sol.theta));
        if (need_edf) {
            const MatrixXd z = llt.solve(xtx_);
            sol.edf = z.trace();
            sol.term_edf.assign(blocks_.size(), 0.0);
            for (std::size_t b = 0; b < blocks_.size(); ++b) {
                sol.term_edf[b] = z.diagonal().segment(blocks_[b].start, blocks_[b].width).sum();
            }
        }
        sol.gcv = gcv_of(sol.rss, sol.edf);
        sol.ok = std::isfinite(sol.gcv);
        return sol;
    }

    // Names of terms loading on the (near) null space of the penalized system.
    std::vector<std::size_t> offending(const std::vector<double>& lambda) const {
        const MatrixXd a = system(lambda);
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
        const auto& ev = es.eigenvalues();
        const double tol = std::max(1e-300, ev.cwiseAbs().maxCoeff() * 1e-13);
        std::vector<std::size_t> bad;
        for (Index i = 0; i < ev.size(); ++i) {
            if (ev(i) > tol) continue;
            const VectorXd v = es.eigenvectors().col(i);
            for (std::size_t b = 0; b < blocks_.size(); ++b) {
                if (v.segment(blocks_[b].start, blocks_[b].width).norm() > 0.1 &&
                    std::find(bad.begin(), bad.end(), blocks_[b].term) == bad.end()) {
                    bad.push_back(blocks_[b].term);
                }
            }
        }
        return bad;
    }

private:
    double gcv_of(double rss, double edf) const {
        const double denom = static_cast<double>(n_) - edf - 1.0;
        if (denom <= 0.0) return std::numeric_limits<double>::infinity();
        return static_cast<double>(n_) * rss / (denom * denom);
    }

    MatrixXd xtx_;
    VectorXd xty_;
    double yty_;
    std::size_t n_;
    std::vector<DesignBlock> blocks_;
    std::vector<double> scale_;
};

} // namespace

AdditiveModel fit(const Formula& formula, const SeriesFrame& frame, const LambdaPolicy& policy) {
    if (policy.grid.empty()) throw ConfigError("lambda grid is empty");
    for (double g : policy.grid) {
        if (!(g >= 0.0)) throw ConfigError("lambda grid values must be non-negative");
    }

    // Rows: usable rows; every used value must be present.
    std::vector<std::string> used;
    for (const auto& t : formula.terms) {
        for (const auto& name : t.inputs()) {
            if (!frame.has(name) && name != frame.target_name()) {
                throw DataError("fit: missing column '" + name + "' in frame '" + frame.zone_id() + "'");
            }
            used.push_back(name);
        }
    }
    const std::string response = formula.response.empty() ? frame.target_name() : formula.response;
    if (response != frame.target_name() && !frame.has(response)) {
        throw DataError("fit: response '" + response + "' not found in frame '" + frame.zone_id() + "'");
    }
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < frame.size(); ++r) {
        if (!frame.usable(r)) continue;
        rows.push_back(r);
    }
    for (const auto& name : used) {
        const auto v = frame.values(name);
        for (std::size_t r : rows) {
            if (!std::isfinite(v[r])) {
                throw DataError("fit: missing value in column '" + name + "' at " + format_iso8601(frame.timestamps()[r]));
            }
        }
    }
    const auto yv = frame.values(response);
    for (std::size_t r : rows) {
        if (!std::isfinite(yv[r])) throw DataError("fit: missing response value at " + format_iso8601(frame.timestamps()[r]));
    }
    if (rows.size() < 2) throw DataError("fit: fewer than 2 usable rows");
    const SeriesFrame train = rows.size() == frame.size() ? frame : frame.select(rows);
    const std::size_t n = train.size();
    const auto nn = static_cast<Index>(n);

    AdditiveModel model;
    model.formula = formula;
    model.policy = policy;
    model.n_obs = n;

    // Assemble the reduced design.
    std::vector<MatrixXd> parts;
    std::vector<DesignBlock> blocks;
    Index p = 0;
    for (std::size_t ti = 0; ti < formula.terms.size(); ++ti) {
        FittedTerm ft;
        BasisBlock bb = build_basis(formula.terms[ti], train, &ft);
        model.warnings.insert(model.warnings.end(), bb.warnings.begin(), bb.warnings.end());

        DesignBlock blk;
        blk.term = ti;
        const auto& spec = ft.spec;
        MatrixXd reduced;
        if (spec.kind == TermKind::Linear || spec.kind == TermKind::LinearByFactor) {
            reduced = bb.design;
            ft.centers.resize(static_cast<std::size_t>(reduced.cols()));
            for (Index c = 0; c < reduced.cols(); ++c) {
                const double m = reduced.col(c).mean();
                ft.centers[static_cast<std::size_t>(c)] = m;
                reduced.col(c).array() -= m;
            }
            blk.copies = static_cast<std::size_t>(reduced.cols());
            blk.raw_per_copy = 1;
        } else {
            // Shift-invariant blocks: centre within the rows of each copy and
            // drop the last column of the copy to fix the gauge.
            std::size_t copies = 1;
            Index per = bb.design.cols();
            std::vector<std::size_t> codes(n, 0);
            if (spec.kind == TermKind::Smooth && !spec.by.empty()) {
                copies = ft.levels.size();
                per = bb.design.cols() / static_cast<Index>(copies);
                codes = level_codes(train, spec.by, ft.levels);
            }
            blk.copies = copies;
            blk.raw_per_copy = per;
            blk.drops_last = true;
            reduced = MatrixXd::Zero(nn, static_cast<Index>(copies) * (per - 1));
            blk.means.assign(copies, std::vector<double>(static_cast<std::size_t>(per), 0.0));
            std::vector<std::size_t> counts(copies, 0);
            for (Index r = 0; r < nn; ++r) ++counts[codes[r]];
            for (Index r = 0; r < nn; ++r) {
                const std::size_t c = codes[r];
                for (Index j = 0; j < per; ++j) blk.means[c][j] += bb.design(r, static_cast<Index>(c) * per + j);
            }
            for (std::size_t c = 0; c < copies; ++c) {
                for (auto& m : blk.means[c]) m /= static_cast<double>(std::max<std::size_t>(1, counts[c]));
            }
            for (Index r = 0; r < nn; ++r) {
                const std::size_t c = codes[r];
                for (Index j = 0; j + 1 < per; ++j) {
                    reduced(r, static_cast<Index>(c) * (per - 1) + j) = bb.design(r, static_cast<Index>(c) * per + j) - blk.means[c][j];
                }
            }
            // rows of other copies are exactly zero; nothing to centre there
            if (bb.penalty.size() != 0) {
                const Index w = per - 1;
                blk.penalty = MatrixXd::Zero(static_cast<Index>(copies) * w, static_cast<Index>(copies) * w);
                for (std::size_t c = 0; c < copies; ++c) {
                    blk.penalty.block(static_cast<Index>(c) * w, static_cast<Index>(c) * w, w, w) = bb.penalty.topLeftCorner(w, w);
                }
            }
        }
        blk.start = p;
        blk.width = reduced.cols();
        p += blk.width;
        parts.push_back(std::move(reduced));
        blocks.push_back(std::move(blk));
        model.terms.push_back(std::move(ft));
    }

    if (2 * n <= static_cast<std::size_t>(p) + 1) {
        throw DataError("fit: " + std::to_string(n) + " rows is too few for " + std::to_string(p + 1) + " coefficients");
    }

    MatrixXd x(nn, p);
    for (std::size_t b = 0; b < blocks.size(); ++b) x.middleCols(blocks[b].start, blocks[b].width) = parts[b];
    parts.clear();

    VectorXd y(nn);
    for (Index r = 0; r < nn; ++r) y(r) = train.values(response)[r];
    const double ybar = y.mean();
    y.array() -= ybar;
    model.intercept = ybar;

    MatrixXd xtx = MatrixXd::Zero(p, p);
    xtx.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
    xtx = xtx.selfadjointView<Eigen::Lower>();
    const VectorXd xty = x.transpose() * y;
    PenalizedSystem sys(std::move(xtx), xty, y.squaredNorm(), n, std::move(blocks));
    sys.compute_scales();

    // Lambda selection.
    std::vector<double> lambda(sys.blocks().size(), 0.0);
    std::vector<bool> searchable(lambda.size(), false);
    for (std::size_t b = 0; b < lambda.size(); ++b) {
        const auto& blk = sys.blocks()[b];
        if (blk.penalty.size() == 0) continue;
        const auto label = formula.terms[blk.term].label();
        const auto ov = policy.overrides.find(label);
        if (ov != policy.overrides.end()) {
            lambda[b] = ov->second;
        } else if (policy.mode == LambdaPolicy::Mode::Fixed) {
            lambda[b] = policy.fixed;
        } else {
            lambda[b] = 1.0;
            searchable[b] = true;
        }
    }
    for (const auto& [label, _] : policy.overrides) {
        const bool known = std::any_of(formula.terms.begin(), formula.terms.end(),
                                       [&](const TermSpec& t) { return t.label() == label && t.is_smooth(); });
        if (!known) throw ConfigError("lambda override for unknown smooth term '" + label + "'");
    }
    Solution best = sys.solve(lambda);
    for (std::size_t b = 0; b < lambda.size(); ++b) {
        if (!searchable[b]) continue;
        double best_lambda = lambda[b];
        for (double g : policy.grid) {
            if (g == best_lambda) continue;
            lambda[b] = g;
            Solution s = sys.solve(lambda);
            if (s.ok && (!best.ok || s.gcv < best.gcv)) {
                best = std::move(s);
                best_lambda = g;
            }
        }
        lambda[b] = best_lambda;
    }
    if (!best.ok) best = sys.solve(lambda);
    if (!best.ok) {
        std::string names;
        for (std::size_t t : sys.offending(lambda)) {
            if (!names.empty()) names += ", ";
            names += formula.terms[t].label();
        }
        throw NumericalError("fit: singular system after penalty" +
                             (names.empty() ? std::string() : "; offending terms: " + names));
    }

    // Unpack coefficients and normalize each shift-invariant block so its
    // training-sample mean contribution is zero.
    for (std::size_t b = 0; b < sys.blocks().size(); ++b) {
        const auto& blk = sys.blocks()[b];
        FittedTerm& ft = model.terms[blk.term];
        ft.lambda = lambda[b];
        ft.penalty_scale = sys.scale(b);
        ft.edf = best.term_edf.empty() ? 0.0 : best.term_edf[b];
        if (!blk.drops_last) {
            ft.coefficients.assign(blk.copies, std::vector<double>(1));
            for (std::size_t c = 0; c < blk.copies; ++c) {
                ft.coefficients[c][0] = best.theta(blk.start + static_cast<Index>(c));
            }
            continue;
        }
        const Index w = blk.raw_per_copy - 1;
        std::vector<std::vector<double>> coef(blk.copies, std::vector<double>(static_cast<std::size_t>(blk.raw_per_copy), 0.0));
        for (std::size_t c = 0; c < blk.copies; ++c) {
            double shift = 0.0;
            for (Index j = 0; j < w; ++j) {
                coef[c][j] = best.theta(blk.start + static_cast<Index>(c) * w + j);
                shift -= blk.means[c][j] * coef[c][j];
            }
            for (auto& v : coef[c]) v += shift;
        }
        if (ft.spec.kind == TermKind::Categorical) {
            ft.coefficients = {coef[0]};
        } else {
            ft.coefficients = std::move(coef);
        }
    }
    model.edf = best.edf + 1.0;
    model.rss = best.rss;
    model.gcv = best.gcv;
    const double dof = static_cast<double>(n) - model.edf;
    if (dof > 0.0) {
        model.sigma2 = best.rss / dof;
    } else {
        model.sigma2 = 0.0;
        model.warnings.push_back("no residual degrees of freedom; sigma^2 set to 0");
    }
    return model;
}

// ---------------------------------------------------------------------------
// Prediction and effects

const FittedTerm& AdditiveModel::term(const std::string& label) const {
    for (const auto& t : terms) {
        if (t.spec.label() == label) return t;
    }
    throw DataError("model has no term '" + label + "'");
}

std::vector<std::vector<double>> AdditiveModel::contributions(const SeriesFrame& frame) const {
    std::vector<std::vector<double>> out;
    out.reserve(terms.size());
    for (const auto& t : terms) out.push_back(t.contribution(frame));
    return out;
}

std::vector<double> AdditiveModel::predict(const SeriesFrame& frame) const {
    std::vector<double> out(frame.size(), intercept);
    for (const auto& t : terms) {
        const auto c = t.contribution(frame);
        for (std::size_t r = 0; r < out.size(); ++r) out[r] += c[r];
    }
    return out;
}

std::vector<double> predict(const AdditiveModel& model, const SeriesFrame& frame) { return model.predict(frame); }

EffectFunction::EffectFunction(std::shared_ptr<const FittedTerm> term, std::optional<std::size_t> level)
    : term_(std::move(term)), level_(level) {
    name_ = term_->spec.label();
    if (level_) name_ += "=" + term_->levels.at(*level_);
}

double EffectFunction::operator()(double x) const {
    if (arity() != 1) throw ConfigError("effect '" + name_ + "' is bivariate");
    return term_->evaluate_at(std::span<const double>(&x, 1), level_.value_or(0));
}

double EffectFunction::operator()(double x1, double x2) const {
    if (arity() != 2) throw ConfigError("effect '" + name_ + "' is univariate");
    const double x[2] = {x1, x2};
    return term_->evaluate_at(x);
}

std::vector<double> EffectFunction::evaluate(const SeriesFrame& frame) const {
    auto out = term_->contribution(frame);
    if (level_) {
        const auto codes = level_codes(frame, term_->spec.by, term_->levels);
        for (std::size_t r = 0; r < out.size(); ++r) {
            if (codes[r] != *level_) out[r] = 0.0;
        }
    }
    return out;
}

std::vector<EffectFunction> extract_effects(const AdditiveModel& model, const std::vector<std::string>& labels) {
    std::vector<const FittedTerm*> chosen;
    if (labels.empty()) {
        for (const auto& t : model.terms) chosen.push_back(&t);
    } else {
        for (const auto& l : labels) chosen.push_back(&model.term(l));
    }
    std::vector<EffectFunction> out;
    for (const FittedTerm* t : chosen) {
        auto shared = std::make_shared<const FittedTerm>(*t);
        if (t->spec.kind == TermKind::Smooth && !t->spec.by.empty()) {
            for (std::size_t l = 0; l < t->levels.size(); ++l) out.emplace_back(shared, l);
        } else {
            out.emplace_back(shared, std::nullopt);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json basis_to_json(const spline::BSplineBasis& b) {
    return {{"cyclic", b.cyclic()}, {"lo", b.lo()}, {"hi", b.hi()}, {"size", b.size()}, {"interior", b.interior()}};
}

spline::BSplineBasis basis_from_json(const nlohmann::json& j) {
    if (j.at("cyclic").get<bool>()) {
        const double lo = j.at("lo").get<double>();
        return spline::BSplineBasis::periodic(lo, j.at("hi").get<double>() - lo, j.at("size").get<std::size_t>());
    }
    return spline::BSplineBasis::open(j.at("lo").get<double>(), j.at("hi").get<double>(),
                                      j.at("interior").get<std::vector<double>>());
}

} // namespace

std::string serialize(const AdditiveModel& model) {
    nlohmann::json j;
    j["format"] = "hierforecast.additive-model";
    j["version"] = 1;
    j["formula"] = to_string(model.formula);
    j["intercept"] = model.intercept;
    j["sigma2"] = model.sigma2;
    j["edf"] = model.edf;
    j["gcv"] = model.gcv;
    j["rss"] = model.rss;
    j["n_obs"] = model.n_obs;
    j["warnings"] = model.warnings;
    j["policy"] = {{"mode", model.policy.mode == LambdaPolicy::Mode::Gcv ? "gcv" : "fixed"},
                   {"fixed", model.policy.fixed},
                   {"grid", model.policy.grid},
                   {"overrides", model.policy.overrides}};
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& t : model.terms) {
        nlohmann::json jt;
        jt["spec"] = to_string(t.spec);
        jt["levels"] = t.levels;
        jt["coefficients"] = t.coefficients;
        jt["centers"] = t.centers;
        jt["lambda"] = t.lambda;
        jt["penalty_scale"] = t.penalty_scale;
        jt["edf"] = t.edf;
        jt["ranges"] = t.ranges;
        nlohmann::json bases = nlohmann::json::array();
        for (const auto& b : t.bases) bases.push_back(basis_to_json(b));
        jt["bases"] = bases;
        terms.push_back(jt);
    }
    j["terms"] = terms;
    return j.dump(1);
}

AdditiveModel deserialize(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw DataError(std::string("model container: ") + e.what());
    }
    if (j.value("format", "") != "hierforecast.additive-model") throw DataError("model container: wrong format tag");
    AdditiveModel m;
    m.formula = parse_formula(j.at("formula").get<std::string>());
    m.intercept = j.at("intercept").get<double>();
    m.sigma2 = j.at("sigma2").get<double>();
    m.edf = j.at("edf").get<double>();
    m.gcv = j.at("gcv").get<double>();
    m.rss = j.at("rss").get<double>();
    m.n_obs = j.at("n_obs").get<std::size_t>();
    m.warnings = j.at("warnings").get<std::vector<std::string>>();
    const auto& pj = j.at("policy");
    m.policy.mode = pj.at("mode").get<std::string>() == "gcv" ? LambdaPolicy::Mode::Gcv : LambdaPolicy::Mode::Fixed;
    m.policy.fixed = pj.at("fixed").get<double>();
    m.policy.grid = pj.at("grid").get<std::vector<double>>();
    m.policy.overrides = pj.at("overrides").get<std::map<std::string, double>>();
    for (const auto& jt : j.at("terms")) {
        FittedTerm t;
        t.spec = parse_formula("y ~ " + jt.at("spec").get<std::string>()).terms.at(0);
        t.levels = jt.at("levels").get<std::vector<std::string>>();
        t.coefficients = jt.at("coefficients").get<std::vector<std::vector<double>>>();
        t.centers = jt.at("centers").get<std::vector<double>>();
        t.lambda = jt.at("lambda").get<double>();
        t.penalty_scale = jt.at("penalty_scale").get<double>();
        t.edf = jt.at("edf").get<double>();
        t.ranges = jt.at("ranges").get<std::vector<std::pair<double, double>>>();
        for (const auto& jb : jt.at("bases")) t.bases.push_back(basis_from_json(jb));
        m.terms.push_back(std::move(t));
    }
    // The stored term specs carry the resolved k, keep the formula in sync.
    for (std::size_t i = 0; i < m.terms.size() && i < m.formula.terms.size(); ++i) m.formula.terms[i] = m.terms[i].spec;
    return m;
}

void save_model(const AdditiveModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write model to '" + path + "'");
    out << serialize(model) << '\n';
}

AdditiveModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read model from '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

// ---------------------------------------------------------------------------
// PartitionedModel

PartitionedModel PartitionedModel::fit(const Formula& formula, const SeriesFrame& frame,
                                       const std::string& partition_column, const LambdaPolicy& policy) {
    PartitionedModel pm;
    pm.column_ = partition_column;
    if (partition_column.empty()) {
        pm.models_.emplace(0L, gam::fit(formula, frame, policy));
        return pm;
    }
    const auto keys = frame.values(partition_column);
    std::map<long, std::vector<std::size_t>> groups;
    for (std::size_t r = 0; r < frame.size(); ++r) groups[std::lround(keys[r])].push_back(r);
    for (const auto& [key, rows] : groups) {
        pm.models_.emplace(key, gam::fit(formula, frame.select(rows), policy));
    }
    return pm;
}

const AdditiveModel& PartitionedModel::model_for(long key) const {
    const auto it = models_.find(key);
    if (it == models_.end()) {
        throw DataError("no model for " + column_ + " = " + std::to_string(key));
    }
    return it->second;
}

const Formula& PartitionedModel::formula() const {
    if (models_.empty()) throw DataError("partitioned model is empty");
    return models_.begin()->second.formula;
}

std::vector<double> PartitionedModel::predict(const SeriesFrame& frame) const {
    if (column_.empty()) return model_for(0).predict(frame);
    const auto keys = frame.values(column_);
    std::map<long, std::vector<std::size_t>> groups;
    for (std::size_t r = 0; r < frame.size(); ++r) groups[std::lround(keys[r])].push_back(r);
    std::vector<double> out(frame.size());
    for (const auto& [key, rows] : groups) {
        const auto part = model_for(key).predict(frame.select(rows));
        for (std::size_t i = 0; i < rows.size(); ++i) out[rows[i]] = part[i];
    }
    return out;
}

std::map<std::string, std::vector<double>> PartitionedModel::effect_columns(const SeriesFrame& frame) const {
    std::map<std::string, std::vector<double>> out;
    auto scatter = [&](const AdditiveModel& m, const SeriesFrame& sub, const std::vector<std::size_t>* rows) {
        for (const auto& effect : extract_effects(m)) {
            const auto v = effect.evaluate(sub);
            auto& col = out[effect.name()];
            if (col.empty()) col.assign(frame.size(), 0.0);
            for (std::size_t i = 0; i < v.size(); ++i) col[rows ? (*rows)[i] : i] = v[i];
        }
    };
    if (column_.empty()) {
        scatter(model_for(0), frame, nullptr);
        return out;
    }
    const auto keys = frame.values(column_);
    std::map<long, std::vector<std::size_t>> groups;
    for (std::size_t r = 0; r < frame.size(); ++r) groups[std::lround(keys[r])].push_back(r);
    for (const auto& [key, rows] : groups) scatter(model_for(key), frame.select(rows), &rows);
    return out;
}

} // namespace hierforecast::gam
