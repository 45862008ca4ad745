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

#include "hierforecast/evaluation.hpp"

#include "hierforecast/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace hierforecast::evaluation {

namespace {

void check_lengths(std::span<const double> a, std::span<const double> f, const std::vector<bool>& usable) {
    if (a.size() != f.size()) throw DataError("metric: actual and forecast lengths differ");
    if (!usable.empty() && usable.size() != a.size()) throw DataError("metric: usable mask length differs");
}

bool keep(const std::vector<bool>& usable, std::size_t i) { return usable.empty() || usable[i]; }

void check_finite(double a, double f, std::size_t i) {
    if (!std::isfinite(a) || !std::isfinite(f)) throw DataError("metric: non-finite value at row " + std::to_string(i));
}

std::string num(double v, const char* fmt = "%.10g") {
    char buf[48];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

double quantile_sorted(const std::vector<double>& s, double p) {
    const double h = p * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

double soft(double x, double t) { return x > t ? x - t : x < -t ? x + t : 0.0; }

double objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& b, double lambda) {
    const double n = static_cast<double>(x.rows());
    return (y - x * b).squaredNorm() / (2.0 * n) + lambda * b.lpNorm<1>();
}

} // namespace

double mape(std::span<const double> actual, std::span<const double> forecast, const std::vector<bool>& usable,
            std::span<const Timestamp> timestamps) {
    check_lengths(actual, forecast, usable);
    double s = 0.0;
    std::size_t n = 0;
    std::vector<std::string> zeros;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        if (!keep(usable, i)) continue;
        check_finite(actual[i], forecast[i], i);
        if (actual[i] == 0.0) {
            zeros.push_back(timestamps.size() == actual.size() ? format_iso8601(timestamps[i]) : "row " + std::to_string(i));
            continue;
        }
        s += std::abs(actual[i] - forecast[i]) / std::abs(actual[i]);
        ++n;
    }
    if (!zeros.empty()) {
        std::string list;
        for (std::size_t i = 0; i < zeros.size() && i < 10; ++i) list += (i ? ", " : "") + zeros[i];
        if (zeros.size() > 10) list += ", ...";
        throw DataError("mape: zero actual value at " + list);
    }
    return n ? 100.0 * s / static_cast<double>(n) : 0.0;
}

double rmse(std::span<const double> actual, std::span<const double> forecast, const std::vector<bool>& usable) {
    check_lengths(actual, forecast, usable);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        if (!keep(usable, i)) continue;
        check_finite(actual[i], forecast[i], i);
        s += (actual[i] - forecast[i]) * (actual[i] - forecast[i]);
        ++n;
    }
    return n ? std::sqrt(s / static_cast<double>(n)) : 0.0;
}

double pinball(std::span<const double> actual, std::span<const double> forecast, double q, const std::vector<bool>& usable) {
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("pinball: level must lie in (0, 1)");
    check_lengths(actual, forecast, usable);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        if (!keep(usable, i)) continue;
        check_finite(actual[i], forecast[i], i);
        const double d = actual[i] - forecast[i];
        s += d > 0.0 ? q * d : (q - 1.0) * d;
        ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

MetricReport evaluate(const std::string& label, std::span<const Timestamp> timestamps, std::span<const double> actual,
                      std::span<const double> forecast, const std::vector<Period>& periods,
                      const std::vector<bool>& usable) {
    if (timestamps.size() != actual.size()) throw DataError("evaluate: timestamps and values lengths differ");
    MetricReport r;
    r.label = label;
    r.mape = mape(actual, forecast, usable, timestamps);
    r.rmse = rmse(actual, forecast, usable);
    for (std::size_t i = 0; i < actual.size(); ++i) r.n += keep(usable, i);
    for (const auto& p : periods) {
        std::vector<bool> mask(actual.size());
        for (std::size_t i = 0; i < actual.size(); ++i) {
            mask[i] = keep(usable, i) && timestamps[i] >= p.begin && timestamps[i] < p.end;
        }
        auto sub = evaluate(p.label, timestamps, actual, forecast, {}, mask);
        r.periods.push_back(std::move(sub));
    }
    return r;
}

// ---------------------------------------------------------------------------

AleCurve ale(const forest::QuantileForest& forest, const SeriesFrame& frame, const std::string& variable,
             std::optional<double> q, std::size_t n_bins) {
    if (n_bins < 2) throw ConfigError("ale: at least 2 bins are needed");
    if (q && !(*q > 0.0 && *q < 1.0)) throw ConfigError("ale: quantile level must lie in (0, 1)");
    const auto names = forest.feature_names();
    if (std::find(names.begin(), names.end(), variable) == names.end()) {
        throw DataError("ale: '" + variable + "' is not a forest input");
    }
    if (frame.column(variable).categorical()) throw DataError("ale: '" + variable + "' is categorical");
    const auto x = frame.values(variable);
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < frame.size(); ++r) {
        if (frame.usable(r) && std::isfinite(x[r])) rows.push_back(r);
    }
    std::vector<double> sorted;
    for (std::size_t r : rows) sorted.push_back(x[r]);
    std::sort(sorted.begin(), sorted.end());
    if (sorted.empty() || sorted.front() == sorted.back()) throw DataError("ale: '" + variable + "' is constant");

    AleCurve c;
    c.variable = variable;
    c.quantile = q;
    for (std::size_t k = 0; k <= n_bins; ++k) {
        const double e = quantile_sorted(sorted, static_cast<double>(k) / static_cast<double>(n_bins));
        if (c.edges.empty() || e > c.edges.back()) c.edges.push_back(e);
    }
    const std::size_t nb = c.edges.size() - 1;

    std::vector<std::size_t> bin(rows.size());
    std::vector<double> lo(rows.size()), hi(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double v = x[rows[i]];
        auto b = static_cast<std::size_t>(std::lower_bound(c.edges.begin() + 1, c.edges.end(), v) - (c.edges.begin() + 1));
        bin[i] = std::min(b, nb - 1);
        lo[i] = c.edges[bin[i]];
        hi[i] = c.edges[bin[i] + 1];
    }
    auto predict = [&](std::vector<double> values) {
        SeriesFrame f = frame.select(rows);
        f.set_column(variable, Column::numeric(std::move(values)));
        return q ? forest.predict_quantile(f, *q) : forest.predict_mean(f);
    };
    const auto f_lo = predict(lo), f_hi = predict(hi);

    std::vector<double> local(nb, 0.0);
    c.counts.assign(nb, 0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        local[bin[i]] += f_hi[i] - f_lo[i];
        ++c.counts[bin[i]];
    }
    std::vector<double> acc(nb + 1, 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
        if (c.counts[b]) local[b] /= static_cast<double>(c.counts[b]);
        acc[b + 1] = acc[b] + local[b];
    }
    c.effect.resize(nb);
    c.centers.resize(nb);
    double mean = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
        c.effect[b] = 0.5 * (acc[b] + acc[b + 1]);
        c.centers[b] = 0.5 * (c.edges[b] + c.edges[b + 1]);
        mean += static_cast<double>(c.counts[b]) * c.effect[b];
    }
    mean /= static_cast<double>(rows.size());
    for (double& e : c.effect) e -= mean;
    return c;
}

void write_ale_csv(const AleCurve& curve, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "bin_center,effect\n";
    for (std::size_t b = 0; b < curve.effect.size(); ++b) out << num(curve.centers[b]) << ',' << num(curve.effect[b]) << '\n';
}

// ---------------------------------------------------------------------------

double lambda_max(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    return (x.transpose() * y).cwiseAbs().maxCoeff() / static_cast<double>(x.rows());
}

LassoFit lasso(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, const Eigen::VectorXd* warm, double tol,
               std::size_t max_sweeps) {
    const auto n = static_cast<double>(x.rows());
    const Eigen::Index p = x.cols();
    LassoFit fit;
    fit.lambda = lambda;
    fit.beta = warm ? *warm : Eigen::VectorXd::Zero(p);
    Eigen::VectorXd r = y - x * fit.beta;
    const Eigen::VectorXd z = x.colwise().squaredNorm().transpose() / n;
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double change = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) {
            if (z[j] == 0.0) continue;
            const double old = fit.beta[j];
            const double rho = x.col(j).dot(r) / n + z[j] * old;
            const double b = soft(rho, lambda) / z[j];
            if (b != old) {
                r -= (b - old) * x.col(j);
                fit.beta[j] = b;
                change = std::max(change, std::abs(b - old) * std::sqrt(z[j]));
            }
        }
        fit.objective.push_back(objective(x, y, fit.beta, lambda));
        fit.sweeps = sweep + 1;
        if (change < tol) break;
    }
    return fit;
}

std::vector<std::string> lasso_select(const SeriesFrame& frame, const std::string& target, std::size_t n_wanted,
                                      const std::vector<std::string>& candidates) {
    if (n_wanted == 0) throw ConfigError("lasso_select: at least one variable must be wanted");
    std::vector<std::string> names = candidates;
    if (names.empty()) {
        for (const auto& n : frame.column_names()) {
            if (n != target) names.push_back(n);
        }
    }
    std::vector<std::size_t> rows;
    const auto y_raw = frame.values(target);
    for (std::size_t r = 0; r < frame.size(); ++r) {
        if (!frame.usable(r) || !std::isfinite(y_raw[r])) continue;
        bool ok = true;
        for (const auto& n : names) ok = ok && std::isfinite(frame.values(n)[r]);
        if (ok) rows.push_back(r);
    }
    if (rows.size() < 2) throw DataError("lasso_select: fewer than two complete rows");
    const auto n = static_cast<Eigen::Index>(rows.size());

    // one-hot expansion; columns remember their candidate
    std::vector<Eigen::VectorXd> cols;
    std::vector<std::size_t> group;
    for (std::size_t g = 0; g < names.size(); ++g) {
        const Column& c = frame.column(names[g]);
        const auto v = frame.values(names[g]);
        if (c.categorical()) {
            for (std::size_t l = 0; l < c.levels.size(); ++l) {
                Eigen::VectorXd col(n);
                for (Eigen::Index i = 0; i < n; ++i) col[i] = std::lround(v[rows[static_cast<std::size_t>(i)]]) == static_cast<long>(l);
                cols.push_back(std::move(col));
                group.push_back(g);
            }
        } else {
            Eigen::VectorXd col(n);
            for (Eigen::Index i = 0; i < n; ++i) col[i] = v[rows[static_cast<std::size_t>(i)]];
            cols.push_back(std::move(col));
            group.push_back(g);
        }
    }
    Eigen::MatrixXd x(n, 0);
    std::vector<std::size_t> kept;
    for (std::size_t j = 0; j < cols.size(); ++j) {
        Eigen::VectorXd c = cols[j].array() - cols[j].mean();
        const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(n));
        if (sd <= 1e-12) continue;
        x.conservativeResize(n, x.cols() + 1);
        x.col(x.cols() - 1) = c / sd;
        kept.push_back(group[j]);
    }
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y[i] = y_raw[rows[static_cast<std::size_t>(i)]];
    y.array() -= y.mean();

    std::vector<bool> present(names.size(), false);
    for (std::size_t g : kept) present[g] = true;
    const auto n_groups = static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
    auto selected = [&](const Eigen::VectorXd& beta) {
        std::vector<bool> on(names.size(), false);
        for (Eigen::Index j = 0; j < beta.size(); ++j) {
            if (beta[j] != 0.0) on[kept[static_cast<std::size_t>(j)]] = true;
        }
        return on;
    };
    auto names_of = [&](const std::vector<bool>& on) {
        std::vector<std::string> out;
        for (std::size_t g = 0; g < names.size(); ++g) {
            if (on[g]) out.push_back(names[g]);
        }
        return out;
    };
    if (n_wanted >= n_groups) return names_of(present);

    double hi = lambda_max(x, y), lo = hi * 1e-6;
    std::vector<bool> best(names.size(), false);
    std::size_t best_gap = n_wanted;
    Eigen::VectorXd warm = Eigen::VectorXd::Zero(x.cols());
    for (int it = 0; it < 80; ++it) {
        const double mid = std::sqrt(lo * hi);
        const auto fit = lasso(x, y, mid, &warm, 1e-9);
        const auto on = selected(fit.beta);
        const auto count = static_cast<std::size_t>(std::count(on.begin(), on.end(), true));
        const std::size_t gap = count > n_wanted ? count - n_wanted : n_wanted - count;
        if (gap < best_gap) {
            best_gap = gap;
            best = on;
        }
        if (count == n_wanted) break;
        if (count > n_wanted) {
            lo = mid;
        } else {
            hi = mid;
            warm = fit.beta;
        }
    }
    return names_of(best);
}

// ---------------------------------------------------------------------------

std::string format_learner_table(const std::vector<LearnerScore>& scores) {
    std::ostringstream out;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-14s", "");
    out << buf;
    for (const auto& s : scores) {
        std::snprintf(buf, sizeof buf, "%14s", s.model.c_str());
        out << buf;
    }
    out << '\n';
    auto row = [&](const char* label, auto value) {
        std::snprintf(buf, sizeof buf, "%-14s", label);
        out << buf;
        for (const auto& s : scores) out << value(s);
        out << '\n';
    };
    row("RMSE", [&](const LearnerScore& s) {
        std::snprintf(buf, sizeof buf, "%14.2f", s.rmse);
        return std::string(buf);
    });
    row("MAPE (%)", [&](const LearnerScore& s) {
        std::snprintf(buf, sizeof buf, "%14.2f", s.mape);
        return std::string(buf);
    });
    row("covariates", [&](const LearnerScore& s) {
        std::snprintf(buf, sizeof buf, "%14zu", s.n_covariates);
        return std::string(buf);
    });
    return out.str();
}

void write_learner_csv(const std::vector<LearnerScore>& scores, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "metric";
    for (const auto& s : scores) out << ',' << s.model;
    out << "\nRMSE";
    for (const auto& s : scores) out << ',' << num(s.rmse);
    out << "\nMAPE";
    for (const auto& s : scores) out << ',' << num(s.mape);
    out << "\nn_covariates";
    for (const auto& s : scores) out << ',' << s.n_covariates;
    out << '\n';
}

PeriodTable period_table(const std::vector<std::pair<std::string, MetricReport>>& reports) {
    PeriodTable t;
    for (const auto& [method, report] : reports) {
        t.methods.push_back(method);
        std::vector<MetricReport> row;
        if (report.periods.empty()) {
            row.push_back(report);
            if (t.periods.empty()) t.periods.push_back(report.label);
        } else {
            row = report.periods;
            if (t.periods.empty()) {
                for (const auto& p : report.periods) t.periods.push_back(p.label);
            }
        }
        if (row.size() != t.periods.size()) throw DataError("period table: '" + method + "' has a different period split");
        t.cells.push_back(std::move(row));
    }
    return t;
}

std::string format_period_table(const PeriodTable& table, const std::string& unit) {
    std::ostringstream out;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-24s", "");
    out << buf;
    for (const auto& p : table.periods) {
        std::snprintf(buf, sizeof buf, "%26s", p.c_str());
        out << buf;
    }
    out << '\n';
    std::snprintf(buf, sizeof buf, "%-24s", "");
    out << buf;
    for (std::size_t i = 0; i < table.periods.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%12s %13s", "MAPE (%)", ("RMSE (" + unit + ")").c_str());
        out << buf;
    }
    out << '\n';
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
        std::snprintf(buf, sizeof buf, "%-24s", table.methods[m].c_str());
        out << buf;
        for (const auto& cell : table.cells[m]) {
            if (cell.n == 0) {
                std::snprintf(buf, sizeof buf, "%12s %13s", "n/a", "n/a");
            } else {
                std::snprintf(buf, sizeof buf, "%12.2f %13.0f", cell.mape, cell.rmse);
            }
            out << buf;
        }
        out << '\n';
    }
    return out.str();
}

void write_period_csv(const PeriodTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "method,period,mape,rmse,n\n";
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
        for (std::size_t p = 0; p < table.periods.size(); ++p) {
            const auto& c = table.cells[m][p];
            out << table.methods[m] << ',' << table.periods[p] << ',' << num(c.mape) << ',' << num(c.rmse) << ',' << c.n << '\n';
        }
    }
}

} // namespace hierforecast::evaluation
