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
#include "hierforecast/gam.hpp"
#include "hierforecast/series.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hierforecast::transfer {

// ---------------------------------------------------------------------------
// Effect transfer

/// A fitted source GAM whose effects on the common covariates become new
/// target columns named `<prefix>.f_<effect>`.
struct TransferSource {
    std::shared_ptr<const gam::AdditiveModel> model;
    std::vector<std::string> common; // covariate names shared with the target
    std::string prefix = "src";
};

/// Names of the columns transfer_features would add.
std::vector<std::string> transferred_columns(const gam::AdditiveModel& source, const std::vector<std::string>& common,
                                             const std::string& prefix = "src");

/// Adds one column per effect of every source term whose covariates all lie
/// in `common`. By-factor smooths expand per level; tensor terms evaluate on
/// the covariate pair. Existing columns are never modified.
SeriesFrame transfer_features(const gam::AdditiveModel& source, const std::vector<std::string>& common,
                              const SeriesFrame& target, const std::string& prefix = "src");

/// Effect columns of a (partitioned) model, `<prefix>.f_<effect>`, evaluated
/// on usable rows (NaN elsewhere).
SeriesFrame add_effect_columns(const gam::PartitionedModel& model, const SeriesFrame& frame, const std::string& prefix);

// ---------------------------------------------------------------------------
// Residuals for stacking

enum class ResidualMethod {
    BlockCv,     // contiguous folds, each predicted by a fit on the others
    Online,      // expanding window refit at every day boundary
    OutOfSample, // the model never saw the frame: plain y - prediction
};

struct ResidualSpec {
    ResidualMethod method = ResidualMethod::BlockCv;
    std::size_t folds = 5;
    /// Online: first refit boundary (rows before it get NaN residuals).
    Timestamp online_start = 0;
    int utc_offset_minutes = 0;
};

/// Residuals y - yhat where yhat never used the row it predicts. Refits keep
/// the smoothing parameters selected by `model`. Unusable rows get NaN.
std::vector<double> stacking_residuals(const gam::AdditiveModel& model, const SeriesFrame& frame,
                                       const ResidualSpec& spec);

/// Usable-row prediction (NaN on unusable rows, which may hold missing lags).
std::vector<double> predict_usable(const gam::AdditiveModel& model, const SeriesFrame& frame);
std::vector<double> predict_usable(const gam::PartitionedModel& model, const SeriesFrame& frame);

// ---------------------------------------------------------------------------
// Stacked GAM-RF

struct StackedConfig {
    gam::LambdaPolicy policy;
    ResidualSpec residuals;
    forest::ForestConfig forest;
    /// Original target covariates given to the forest.
    std::vector<std::string> covariates;
    /// Also give the forest the effects of the target GAM itself.
    bool target_effects = true;
    std::string target_prefix = "tgt";
    std::vector<double> quantiles = {0.5};
};

struct StackedModel {
    gam::AdditiveModel gam;
    std::vector<TransferSource> sources;
    bool target_effects = true;
    std::string target_prefix = "tgt";
    std::vector<std::string> forest_features;
    /// Residual corrector; one quantile forest serves every level.
    forest::QuantileForest corrector;
    std::vector<double> quantiles;
    ResidualSpec residuals;

    /// Frame plus every transferred and target-effect column.
    SeriesFrame augment(const SeriesFrame& frame) const;
    std::vector<double> predict_gam(const SeriesFrame& frame) const;
    std::vector<double> correction(const SeriesFrame& frame) const;
    /// GAM + mean correction.
    std::vector<double> predict_point(const SeriesFrame& frame) const;
    /// GAM + corrector quantile at level q.
    std::vector<double> predict_quantile(const SeriesFrame& frame, double q) const;
};

StackedModel fit_stacked(const std::vector<TransferSource>& sources, const gam::Formula& target_formula,
                         const SeriesFrame& target, const StackedConfig& config);

/// Fits the source GAM and wraps it as a transfer source.
TransferSource fit_source(const gam::Formula& formula, const SeriesFrame& source, const std::vector<std::string>& common,
                          const gam::LambdaPolicy& policy = {}, const std::string& prefix = "src");

// ---------------------------------------------------------------------------
// Expert panel

inline const std::string kGlobalZone = "global";

struct PanelConfig {
    /// Formula of the per-zone GAM on the normalized target.
    std::string formula;
    /// One GAM per value of this column ("Instant" gives 48 models); empty
    /// for a single model.
    std::string partition_column;
    gam::LambdaPolicy policy;
    /// Covariates given to the forests besides the transferred GAM effects.
    std::vector<std::string> forest_covariates;
    bool transfer_effects = true;
    std::vector<double> quantiles = {0.05, 0.1, 0.5, 0.9, 0.95};
    forest::ForestConfig forest;
    /// GAM training window [source_begin, source_end).
    Timestamp source_begin = 0;
    Timestamp source_end = 0;
    /// First target day: forests learn residuals of rows with t >= target_begin.
    Timestamp target_begin = 0;
    /// Panel rows: t in [panel_begin, panel_end); panel_begin defaults to source_end.
    Timestamp panel_begin = 0;
    Timestamp panel_end = 0;
    /// Forests exist once this many target rows are available.
    std::size_t min_forest_rows = 48;
    int utc_offset_minutes = 0;
    /// Experts are clipped to [0, clip_factor * max normalized load on the source window].
    double clip_factor = 2.0;
    std::string zone_column = "Zone";
};

/// Per zone (K zones then the global level) named expert streams on the
/// normalized scale. NaN marks an expert that does not exist yet.
struct ExpertPanel {
    std::vector<Timestamp> timestamps;
    std::vector<std::string> zones;
    std::vector<std::string> experts;
    /// values[zone][expert][row]
    std::vector<std::vector<std::vector<double>>> values;
    /// Normalized outcomes per zone, aligned with timestamps.
    std::vector<std::vector<double>> outcomes;
    double bound = 0.0;

    std::size_t zone_index(const std::string& zone) const;
    std::size_t expert_index(const std::string& expert) const;
    const std::vector<double>& stream(const std::string& zone, const std::string& expert) const;
    std::size_t size() const noexcept { return timestamps.size(); }
};

std::vector<std::string> expert_names(const std::vector<double>& quantiles);

/// Fitted per-zone GAMs kept alongside the panel (for importance/ALE reports).
struct PanelArtifacts {
    std::map<std::string, gam::PartitionedModel> gams;
    /// Last daily forests per zone (individual) and the common one.
    std::map<std::string, forest::QuantileForest> individual;
    std::optional<forest::QuantileForest> common;
    /// Augmented per-zone frames (effect columns, residual column "resid").
    std::map<std::string, SeriesFrame> frames;
    std::vector<std::string> forest_features;
    std::size_t refits = 0;
};

/// `zones` maps zone name to its normalized frame; `global` is the
/// normalized global frame. All frames must share timestamps.
ExpertPanel build_expert_panel(const std::map<std::string, SeriesFrame>& zones, const SeriesFrame& global,
                               const PanelConfig& config, PanelArtifacts* artifacts = nullptr);

/// Long CSV: timestamp,zone,expert,value.
void write_panel_csv(const ExpertPanel& panel, const std::string& path);
ExpertPanel read_panel_csv(const std::string& path);

/// Row-stacks frames on the given columns (timestamps become row indices);
/// categorical columns are merged by label.
SeriesFrame stack_rows(const std::vector<const SeriesFrame*>& frames, const std::vector<std::string>& columns,
                       const std::string& target);

} // namespace hierforecast::transfer
