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

#include "hierforecast/error.hpp"
#include "hierforecast/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hierforecast::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kYear = 365.25 * 86400.0;

template <class F>
void stage(RunArtifacts& out, const std::string& name, F&& body) {
    try {
        body();
    } catch (const Error& e) {
        throw Error(e.kind(), "stage '" + name + "': " + e.what());
    } catch (const std::exception& e) {
        throw NumericalError("stage '" + name + "': " + e.what());
    }
    out.stages.push_back(name);
}

CalendarSpec calendar_of(const DataConfig& data) {
    CalendarSpec cal;
    if (!data.holidays_file.empty()) cal.holidays = read_holidays(data.holidays_file);
    cal.utc_offset_minutes = data.utc_offset_minutes;
    cal.daylight_saving = data.daylight_saving;
    return cal;
}

SeriesFrame read_zone(const std::string& path, const DataConfig& data, const std::string& zone) {
    CsvSchema schema;
    schema.target = data.target;
    schema.categorical = {data.categorical.begin(), data.categorical.end()};
    schema.zone_id = zone;
    return read_csv(path, schema);
}

std::vector<double> finite_at(const SeriesFrame& frame, const std::vector<Timestamp>& ts) {
    std::vector<double> out;
    out.reserve(ts.size());
    for (Timestamp t : ts) {
        const std::size_t r = frame.lower_row(t);
        if (r >= frame.size() || frame.timestamps()[r] != t) throw DataError("no observation at " + format_iso8601(t));
        out.push_back(frame.target()[r]);
    }
    return out;
}

std::vector<bool> finite_mask(const std::vector<double>& a, const std::vector<double>& f) {
    std::vector<bool> mask(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) mask[i] = std::isfinite(a[i]) && std::isfinite(f[i]);
    return mask;
}

/// Rows of [begin, end) with a usable row and a finite residual.
SeriesFrame residual_rows(const SeriesFrame& frame, Timestamp begin, Timestamp end) {
    const SeriesFrame w = frame.window(begin, end);
    const auto resid = w.values("resid");
    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < w.size(); ++r) {
        if (w.usable(r) && std::isfinite(resid[r])) keep.push_back(r);
    }
    return w.select(keep);
}

void add_analysis(RunArtifacts& out, const PipelineConfig& config, const std::string& name,
                  const forest::QuantileForest& forest, const SeriesFrame& frame) {
    if (frame.usable_count() < 2) return;
    if (config.output.importance) {
        out.importances.push_back({name, forest::permutation_importance(forest, frame, forest::Loss::squared(), config.seed)});
    }
    for (const auto& var : config.output.ale) {
        const auto& names = forest.feature_names();
        if (std::find(names.begin(), names.end(), var) == names.end()) continue;
        out.ales.push_back({name + "_" + var, evaluation::ale(forest, frame, var, std::nullopt, config.output.ale_bins)});
    }
}

void score(RunArtifacts& out, const std::vector<evaluation::Period>& periods) {
    for (const auto& [method, forecast] : out.forecasts) {
        out.reports.emplace_back(method, evaluation::evaluate("test", out.timestamps, out.actual, forecast, periods,
                                                              finite_mask(out.actual, forecast)));
    }
}

// ---------------------------------------------------------------------------
// Hierarchical pipelines (synthetic and covid_hier)

void run_hierarchical(const PipelineConfig& config, RunArtifacts& out) {
    const auto& w = config.windows;
    std::map<std::string, SeriesFrame> zones;
    SeriesFrame global;

    stage(out, "load", [&] {
        if (config.kind == PipelineKind::Synthetic) {
            auto data = generate_synthetic(*config.data.synthetic);
            zones = std::move(data.zones);
            global = std::move(data.global);
        } else {
            for (const auto& [zone, path] : config.data.zone_files) zones.emplace(zone, read_zone(path, config.data, zone));
            global = read_zone(config.data.global_file, config.data, transfer::kGlobalZone);
        }
        if (global.target_name() != config.data.target) {
            throw DataError("target column is '" + global.target_name() + "', configured '" + config.data.target + "'");
        }
    });

    stage(out, "prepare", [&] {
        const auto cal = calendar_of(config.data);
        for (auto& [_, frame] : zones) prepare_frame(frame, cal, w.source_begin);
        prepare_frame(global, cal, w.source_begin);
    });

    NormalizationTable table;
    std::map<std::string, SeriesFrame> zones_n;
    SeriesFrame global_n;
    stage(out, "normalize", [&] {
        std::vector<SeriesFrame> all;
        for (const auto& [_, frame] : zones) all.push_back(frame);
        all.push_back(global);
        table = fit_normalizer(all, w.source_begin, w.source_end, config.models.per_instant);
        for (const auto& [zone, frame] : zones) {
            SeriesFrame n = normalize(frame, table);
            zones_n.emplace(zone, config.models.lags.empty() ? std::move(n) : add_lags(n, config.models.lags));
        }
        global_n = normalize(global, table);
        if (!config.models.lags.empty()) global_n = add_lags(global_n, config.models.lags);
    });

    transfer::PanelArtifacts panel_art;
    stage(out, "experts", [&] {
        transfer::PanelConfig pc;
        pc.formula = config.models.formula;
        pc.partition_column = config.models.partition;
        pc.policy = config.models.policy;
        pc.forest_covariates = config.experts.forest_covariates;
        pc.transfer_effects = config.experts.transfer_effects;
        pc.quantiles = config.experts.quantiles;
        pc.forest = config.experts.forest;
        pc.source_begin = w.source_begin;
        pc.source_end = w.source_end;
        pc.target_begin = w.target_begin;
        pc.panel_end = w.test_end;
        pc.min_forest_rows = config.experts.min_forest_rows;
        pc.utc_offset_minutes = config.data.utc_offset_minutes;
        out.panel = transfer::build_expert_panel(zones_n, global_n, pc, &panel_art);
    });

    stage(out, "aggregation", [&] {
        for (auto kind : config.aggregation.strategies) {
            aggregation::StrategyConfig sc{kind, config.aggregation.loss, config.aggregation.inner_loss};
            out.strategies.push_back(aggregation::run_strategy(sc, *out.panel, table));
        }
    });

    stage(out, "evaluation", [&] {
        const auto& panel = *out.panel;
        out.timestamps = panel.timestamps;
        out.actual = finite_at(global, panel.timestamps);
        out.forecasts.emplace_back(
            "GAM", denormalize_values(panel.stream(transfer::kGlobalZone, "gam"), panel.timestamps, transfer::kGlobalZone, table));
        const auto& names = panel.experts;
        if (std::find(names.begin(), names.end(), "ind.q0.5") != names.end()) {
            out.forecasts.emplace_back("Individual stacked GAM-RF",
                                       denormalize_values(panel.stream(transfer::kGlobalZone, "ind.q0.5"), panel.timestamps,
                                                          transfer::kGlobalZone, table));
        }
        for (const auto& s : out.strategies) out.forecasts.emplace_back(s.strategy, s.forecast);
        score(out, w.periods);
    });

    stage(out, "analysis", [&] {
        const auto g = panel_art.individual.find(transfer::kGlobalZone);
        if (g != panel_art.individual.end()) {
            add_analysis(out, config, "individual_global", g->second,
                         residual_rows(panel_art.frames.at(transfer::kGlobalZone), w.target_begin, w.test_end));
        }
        if (panel_art.common) {
            std::vector<SeriesFrame> parts;
            for (const auto& zone : out.panel->zones) parts.push_back(residual_rows(panel_art.frames.at(zone), w.target_begin, w.test_end));
            std::vector<const SeriesFrame*> ptrs;
            for (const auto& p : parts) ptrs.push_back(&p);
            auto columns = panel_art.forest_features;
            columns.push_back("Zone");
            add_analysis(out, config, "common", *panel_art.common, transfer::stack_rows(ptrs, columns, "resid"));
        }
    });
}

// ---------------------------------------------------------------------------
// National learners (uk_smartmeter)

void run_national(const PipelineConfig& config, RunArtifacts& out) {
    const auto& w = config.windows;
    const auto& m = config.models;
    SeriesFrame national;
    SeriesFrame meters;

    stage(out, "load", [&] {
        national = read_zone(config.data.national_file, config.data, "national");
        meters = read_zone(config.data.smart_meter_file, config.data, "local");
    });

    stage(out, "prepare", [&] {
        const auto cal = calendar_of(config.data);
        prepare_frame(national, cal, w.source_begin);
        prepare_frame(meters, cal, w.source_begin);
    });

    stage(out, "detrend", [&] {
        auto detrend = [&](const SeriesFrame& f) {
            return apply_detrend(f, fit_detrend(m.detrend_all ? f : f.window(w.source_begin, w.source_end)));
        };
        national = detrend(national);
        meters = detrend(meters);
    });

    const SeriesFrame learn = national.window(w.source_begin, w.source_end);
    const SeriesFrame test = national.window(w.source_end, w.test_end);
    const auto trend = test.values("trend");
    auto retrend = [&](std::vector<double> v) {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += trend[i];
        return v;
    };
    out.timestamps = test.timestamps();
    out.actual = retrend(test.target());

    const auto nat_formula = gam::parse_formula(m.national_formula);
    const auto local_formula = gam::parse_formula(m.local_formula);
    transfer::StackedConfig sc;
    sc.policy = m.policy;
    sc.residuals = m.residuals;
    sc.residuals.utc_offset_minutes = config.data.utc_offset_minutes;
    sc.forest = config.experts.forest;
    sc.covariates = m.covariates;
    sc.target_effects = true;

    auto learner = [&](const std::string& name, std::vector<double> prediction, std::size_t n_cov) {
        auto f = retrend(std::move(prediction));
        const auto mask = finite_mask(out.actual, f);
        out.learners.push_back({name, evaluation::rmse(out.actual, f, mask), evaluation::mape(out.actual, f, mask, out.timestamps),
                                n_cov});
        out.forecasts.emplace_back(name, std::move(f));
    };

    stage(out, "GAM.nat", [&] {
        const auto model = gam::fit(nat_formula, learn, m.policy);
        learner("GAM.nat", transfer::predict_usable(model, test), m.covariates.size());
    });

    stage(out, "RF.nat", [&] {
        const auto rf = forest::fit_forest(learn, learn.target_name(), m.covariates, config.experts.forest);
        learner("RF.nat", rf.predict_mean(test), m.covariates.size());
        add_analysis(out, config, "RF.nat", rf, learn);
    });

    stage(out, "GAM.RF.nat", [&] {
        const auto model = transfer::fit_stacked({}, nat_formula, learn, sc);
        learner("GAM.RF.nat", model.predict_point(test), model.forest_features.size());
    });

    stage(out, "GAM.RF.local", [&] {
        const SeriesFrame local = meters.window(w.source_begin, w.source_end);
        auto source = transfer::fit_source(local_formula, local, m.common, m.policy, "src");
        const auto model = transfer::fit_stacked({source}, nat_formula, learn, sc);
        learner("GAM.RF.local", model.predict_point(test), model.forest_features.size());
        // Importance of the residual corrector on held-out residuals.
        SeriesFrame aug = model.augment(test);
        const auto gam_pred = model.predict_gam(test);
        std::vector<double> resid(test.size(), kNaN);
        for (std::size_t i = 0; i < test.size(); ++i) resid[i] = test.target()[i] - gam_pred[i];
        aug.set_column("resid", Column::numeric(std::move(resid)));
        add_analysis(out, config, "GAM.RF.local", model.corrector, residual_rows(aug, w.source_end, w.test_end));
    });

    stage(out, "evaluation", [&] { score(out, w.periods); });
}

} // namespace

void prepare_frame(SeriesFrame& frame, const CalendarSpec& calendar, Timestamp origin) {
    add_calendar(frame, calendar);
    if (frame.has("Temp")) {
        const auto temp = frame.values("Temp");
        frame.set_column("Temp80", Column::numeric(exp_smooth(temp, 0.8)));
        frame.set_column("Temp95", Column::numeric(exp_smooth(temp, 0.95)));
        frame.set_column("Temp99", Column::numeric(exp_smooth(temp, 0.99)));
        frame.set_column("TempMin99", Column::numeric(daily_extreme(frame, "Temp99", false, calendar.utc_offset_minutes)));
        frame.set_column("TempMax99", Column::numeric(daily_extreme(frame, "Temp99", true, calendar.utc_offset_minutes)));
    }
    std::vector<double> time(frame.size());
    for (std::size_t r = 0; r < frame.size(); ++r) time[r] = static_cast<double>(frame.timestamps()[r] - origin) / kYear;
    frame.set_column("Time", Column::numeric(std::move(time)));

    const auto& day = frame.column("DayType");
    const auto dls = frame.values("DLS");
    std::vector<std::string> labels(frame.size());
    for (std::size_t r = 0; r < frame.size(); ++r) labels[r] = day.label(r) + (dls[r] > 0.5 ? "_1" : "_0");
    frame.set_column("DayDLS", Column::from_labels(labels));
}

void run_pipeline(const PipelineConfig& config, RunArtifacts& out) {
    out.pipeline = to_string(config.kind);
    out.seed = config.seed;
    out.config = config.canonical;
    if (config.kind == PipelineKind::UkSmartmeter) {
        run_national(config, out);
    } else {
        run_hierarchical(config, out);
    }
}

RunArtifacts run_pipeline(const PipelineConfig& config) {
    RunArtifacts out;
    run_pipeline(config, out);
    return out;
}

} // namespace hierforecast::harness
