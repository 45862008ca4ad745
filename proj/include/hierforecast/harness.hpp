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

#include "hierforecast/aggregation.hpp"
#include "hierforecast/evaluation.hpp"
#include "hierforecast/forest.hpp"
#include "hierforecast/gam.hpp"
#include "hierforecast/series.hpp"
#include "hierforecast/transfer.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hierforecast::harness {

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Synthetic hierarchy

struct ShiftSpec {
    Timestamp at = 0;
    /// Multiplicative level per zone (one value applies to every zone).
    std::vector<double> level;
    /// Relative change of the daily profile amplitude per zone.
    std::vector<double> pattern;
};

struct SyntheticSpec {
    std::size_t zones = 4;
    std::size_t days = 420;
    Timestamp start = 1546819200; // 2019-01-07, a Monday
    /// Relative Gaussian noise of every zone load.
    double noise = 0.01;
    std::uint64_t seed = 1;
    std::vector<ShiftSpec> shifts;
};

struct SyntheticData {
    /// Zones "z1".."zK": target "Load", covariate "Temp".
    std::map<std::string, SeriesFrame> zones;
    /// Sum of the zone loads; "Temp" is the mean zone temperature.
    SeriesFrame global;
    /// Noise-free loads.
    std::map<std::string, std::vector<double>> signal;
    std::vector<double> global_signal;
};

SyntheticSpec parse_synthetic_spec(const std::string& json_text);
SyntheticData generate_synthetic(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------
// Configuration

enum class PipelineKind { Synthetic, CovidHier, UkSmartmeter };
std::string to_string(PipelineKind kind);

struct DataConfig {
    std::string target = "Load";
    std::optional<SyntheticSpec> synthetic;
    std::map<std::string, std::string> zone_files;
    std::string global_file;
    std::string national_file;
    std::string smart_meter_file;
    std::string holidays_file;
    int utc_offset_minutes = 0;
    bool daylight_saving = true;
    std::vector<std::string> categorical;
};

struct WindowConfig {
    Timestamp source_begin = 0;
    Timestamp source_end = 0;   // also the end of the learning set
    Timestamp target_begin = 0; // first target day (hierarchical pipelines)
    Timestamp test_end = 0;
    std::vector<evaluation::Period> periods;
};

struct ModelConfig {
    // hierarchical pipelines
    std::string formula;
    std::string partition = "Instant";
    bool per_instant = true;
    std::vector<std::size_t> lags;
    // national / local learners
    std::string national_formula;
    std::string local_formula;
    std::vector<std::string> covariates;
    std::vector<std::string> common;
    bool detrend_all = true;
    transfer::ResidualSpec residuals;
    gam::LambdaPolicy policy;
};

struct ExpertConfig {
    std::vector<double> quantiles = {0.05, 0.1, 0.5, 0.9, 0.95};
    std::vector<std::string> forest_covariates;
    bool transfer_effects = true;
    std::size_t min_forest_rows = 48;
    forest::ForestConfig forest;
};

struct AggregationConfig {
    std::vector<aggregation::StrategyKind> strategies = {std::begin(aggregation::kAllStrategies),
                                                         std::end(aggregation::kAllStrategies)};
    aggregation::LossMode loss = aggregation::LossMode::Gradient;
    aggregation::LossMode inner_loss = aggregation::LossMode::Gradient;
};

struct OutputConfig {
    std::string dir = "out";
    bool importance = true;
    std::vector<std::string> ale;
    std::size_t ale_bins = 20;
};

struct PipelineConfig {
    PipelineKind kind = PipelineKind::Synthetic;
    std::uint64_t seed = 1;
    DataConfig data;
    WindowConfig windows;
    ModelConfig models;
    ExpertConfig experts;
    AggregationConfig aggregation;
    OutputConfig output;
    /// Canonical JSON of the effective configuration (for the manifest).
    std::string canonical;
};

/// Parses and validates. Relative paths resolve against `base_dir`.
/// `seed` and `out_dir` override the file values when given.
PipelineConfig parse_config(const std::string& json_text, const std::string& base_dir = ".",
                            std::optional<std::uint64_t> seed = std::nullopt,
                            std::optional<std::string> out_dir = std::nullopt);
PipelineConfig load_config(const std::string& path, std::optional<std::uint64_t> seed = std::nullopt,
                           std::optional<std::string> out_dir = std::nullopt);
/// Throws ConfigError (or DataError for unreadable files).
void validate(const PipelineConfig& config);

// ---------------------------------------------------------------------------
// Runs

struct NamedImportance {
    std::string name;
    forest::ImportanceReport report;
};

struct NamedAle {
    std::string name;
    evaluation::AleCurve curve;
};

struct RunArtifacts {
    std::string pipeline;
    std::uint64_t seed = 0;
    std::string config;
    std::vector<std::string> stages;
    // hierarchical
    std::optional<transfer::ExpertPanel> panel;
    std::vector<aggregation::StrategyResult> strategies;
    /// Forecast streams in load units, including baselines (method -> values).
    std::vector<Timestamp> timestamps;
    std::vector<double> actual;
    std::vector<std::pair<std::string, std::vector<double>>> forecasts;
    std::vector<std::pair<std::string, evaluation::MetricReport>> reports;
    // national learners
    std::vector<evaluation::LearnerScore> learners;
    // analysis
    std::vector<NamedImportance> importances;
    std::vector<NamedAle> ales;
};

/// Runs every stage, filling `out` as stages complete. A failing stage
/// rethrows with its name prefixed; `out` keeps what was produced.
void run_pipeline(const PipelineConfig& config, RunArtifacts& out);
RunArtifacts run_pipeline(const PipelineConfig& config);

/// Writes metrics (CSV and text), forecasts, weights, panel, importance,
/// ALE, plot-ready long CSVs and manifest.json. Output is a pure function
/// of the artifacts.
std::vector<std::string> emit_reports(const RunArtifacts& artifacts, const std::string& out_dir);

/// Text tables of a run directory, from its metrics.csv.
std::string render_report(const std::string& run_dir);

/// Load/covariate preparation shared by the pipelines: calendar columns,
/// smoothed temperatures (when "Temp" exists), a "Time" column in years
/// from `origin` and the DayType x DLS factor "DayDLS".
void prepare_frame(SeriesFrame& frame, const CalendarSpec& calendar, Timestamp origin);

/// 64-bit FNV-1a of the text, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

} // namespace hierforecast::harness
