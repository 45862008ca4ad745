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

#include "hierforecast/series.hpp"
#include "hierforecast/transfer.hpp"

#include <span>
#include <string>
#include <vector>

namespace hierforecast::aggregation {

enum class LossMode {
    Gradient, // linearized square loss, r_j = 2(yhat - y)(yhat - yhat_j)
    Raw,      // r_j = (y - yhat)^2 - (y - yhat_j)^2
};

/// ML-Poly state over N experts. Dormant experts do not take part until
/// their first finite forecast, when they join with zero regret.
struct MlPolyState {
    std::vector<double> regret;  // R_j
    std::vector<double> squared; // V_j
    std::vector<double> eta;     // 1 / (1 + V_j)
    std::vector<bool> active;
    LossMode loss = LossMode::Gradient;
    double bound = 0.0;

    static MlPolyState create(std::size_t n, LossMode loss = LossMode::Gradient);
    /// All experts dormant.
    static MlPolyState dormant(std::size_t n, LossMode loss = LossMode::Gradient);

    std::size_t size() const noexcept { return regret.size(); }
    /// Current weights (zero for dormant experts).
    std::vector<double> weights() const;
};

struct StepResult {
    double prediction = 0.0;
    std::vector<double> weights; // used for the prediction
    MlPolyState state;
};

/// One online round. Throws DataError on a NaN outcome, on a NaN forecast of
/// an active expert or when no expert is active.
StepResult mlpoly_step(const MlPolyState& state, std::span<const double> forecasts, double outcome);

struct VectorStepResult {
    std::vector<double> prediction; // per coordinate
    std::vector<double> weights;
    MlPolyState state;
};

/// Shared weights over vector experts: forecasts[m][z].
VectorStepResult mlpoly_vector_step(const MlPolyState& state, const std::vector<std::vector<double>>& forecasts,
                                    std::span<const double> outcomes);

// ---------------------------------------------------------------------------
// Strategies

enum class StrategyKind { FullDisaggregated, Vectorial, HierarchicalScaled, HierarchicalUnscaled };

std::string to_string(StrategyKind kind);
StrategyKind parse_strategy(const std::string& name);
inline constexpr StrategyKind kAllStrategies[] = {StrategyKind::FullDisaggregated, StrategyKind::Vectorial,
                                                  StrategyKind::HierarchicalScaled,
                                                  StrategyKind::HierarchicalUnscaled};

struct StrategyConfig {
    StrategyKind kind = StrategyKind::HierarchicalUnscaled;
    LossMode loss = LossMode::Gradient;
    /// Loss of the inner (per zone) aggregations of hierarchical strategies.
    LossMode inner_loss = LossMode::Gradient;
};

/// Weights of one aggregation, one row per panel step.
struct WeightTrace {
    std::string aggregator;
    std::vector<std::string> experts;
    std::vector<std::vector<double>> weights;
};

struct StrategyResult {
    std::string strategy;
    std::vector<Timestamp> timestamps;
    /// Global forecast in load units.
    std::vector<double> forecast;
    /// Observed global load in load units.
    std::vector<double> actual;
    /// Per-zone forecasts in load units (hierarchical strategies).
    std::map<std::string, std::vector<double>> zone_forecasts;
    std::vector<WeightTrace> traces;
};

/// Runs a strategy over a panel whose outcomes are the normalized loads.
/// `table` must hold the means of every panel zone including the global one.
StrategyResult run_strategy(const StrategyConfig& config, const transfer::ExpertPanel& panel,
                            const NormalizationTable& table);

/// Recomputes the forecasts of a run from its weight traces.
std::vector<double> replay(StrategyKind kind, const transfer::ExpertPanel& panel, const NormalizationTable& table,
                           const std::vector<WeightTrace>& traces);

/// timestamp,strategy,forecast_MW
void write_forecasts_csv(const std::vector<StrategyResult>& results, const std::string& path);
/// timestamp,strategy,expert,weight with experts named `<aggregator>/<expert>`.
void write_weights_csv(const std::vector<StrategyResult>& results, const std::string& path);
/// Traces of one strategy read back from write_weights_csv output.
std::vector<WeightTrace> read_weights_csv(const std::string& path, const std::string& strategy);

} // namespace hierforecast::aggregation
