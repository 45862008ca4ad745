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

#include "hierforecast/forest.hpp"
#include "hierforecast/series.hpp"

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hierforecast::evaluation {

// ---------------------------------------------------------------------------
// Losses. `usable` masks rows (empty: every row); `timestamps` only serves
// error messages.

double mape(std::span<const double> actual, std::span<const double> forecast, const std::vector<bool>& usable = {},
            std::span<const Timestamp> timestamps = {});
double rmse(std::span<const double> actual, std::span<const double> forecast, const std::vector<bool>& usable = {});
double pinball(std::span<const double> actual, std::span<const double> forecast, double q,
               const std::vector<bool>& usable = {});

struct Period {
    std::string label;
    Timestamp begin = 0;
    Timestamp end = 0; // exclusive
};

struct MetricReport {
    std::string label;
    double mape = 0.0; // percent
    double rmse = 0.0;
    std::size_t n = 0;
    std::map<double, double> pinball;
    std::vector<MetricReport> periods;
};

/// MAPE and RMSE over the usable rows plus one sub-report per period.
MetricReport evaluate(const std::string& label, std::span<const Timestamp> timestamps, std::span<const double> actual,
                      std::span<const double> forecast, const std::vector<Period>& periods = {},
                      const std::vector<bool>& usable = {});

// ---------------------------------------------------------------------------
// Accumulated local effects

struct AleCurve {
    std::string variable;
    std::optional<double> quantile; // empty: mean readout
    std::vector<double> edges;      // n_bins + 1 quantile edges
    std::vector<double> centers;
    std::vector<double> effect;     // centred, one value per bin
    std::vector<std::size_t> counts;
};

/// First-order ALE of `variable` for the forest readout (mean, or the
/// quantile `q`) over the usable rows of `frame`.
AleCurve ale(const forest::QuantileForest& forest, const SeriesFrame& frame, const std::string& variable,
             std::optional<double> q = std::nullopt, std::size_t n_bins = 20);

/// bin_center,effect
void write_ale_csv(const AleCurve& curve, const std::string& path);

// ---------------------------------------------------------------------------
// LASSO selection

struct LassoFit {
    Eigen::VectorXd beta;
    double lambda = 0.0;
    /// Objective after every coordinate-descent sweep.
    std::vector<double> objective;
    std::size_t sweeps = 0;
};

/// Coordinate descent for (1/2n)|y - X b|^2 + lambda |b|_1 (no intercept;
/// callers centre y and standardize X).
LassoFit lasso(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda, const Eigen::VectorXd* warm = nullptr,
               double tol = 1e-10, std::size_t max_sweeps = 10000);

/// Smallest lambda giving an empty active set.
double lambda_max(const Eigen::MatrixXd& x, const Eigen::VectorXd& y);

/// Names of `n_wanted` candidate columns picked by the LASSO penalty found by
/// bisection (nearest achievable size when the exact one is not on the
/// path). Categorical columns enter one-hot and count once. Empty
/// `candidates` uses every column.
std::vector<std::string> lasso_select(const SeriesFrame& frame, const std::string& target, std::size_t n_wanted,
                                      const std::vector<std::string>& candidates = {});

// ---------------------------------------------------------------------------
// Result tables

/// One learner of the point-forecast comparison.
struct LearnerScore {
    std::string model;
    double rmse = 0.0;
    double mape = 0.0;
    std::size_t n_covariates = 0;
};

/// Models as columns, RMSE / MAPE / covariate count as rows.
std::string format_learner_table(const std::vector<LearnerScore>& scores);
void write_learner_csv(const std::vector<LearnerScore>& scores, const std::string& path);

/// Methods as rows, MAPE and RMSE per period as columns.
struct PeriodTable {
    std::vector<std::string> periods;
    std::vector<std::string> methods;
    /// cells[method][period]
    std::vector<std::vector<MetricReport>> cells;
};

PeriodTable period_table(const std::vector<std::pair<std::string, MetricReport>>& reports);
std::string format_period_table(const PeriodTable& table, const std::string& unit = "MW");
/// method,period,mape,rmse,n
void write_period_csv(const PeriodTable& table, const std::string& path);

} // namespace hierforecast::evaluation
