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

#include "hierforecast/transfer.hpp"

#include "hierforecast/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace hierforecast::transfer {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::int64_t day_of(Timestamp t, int utc_offset_minutes) {
    const Timestamp local = t + static_cast<Timestamp>(utc_offset_minutes) * 60;
    return local >= 0 ? local / kDay : -((-local + kDay - 1) / kDay);
}

Timestamp day_start(std::int64_t day, int utc_offset_minutes) {
    return day * kDay - static_cast<Timestamp>(utc_offset_minutes) * 60;
}

std::span<const double> response_of(const gam::AdditiveModel& model, const SeriesFrame& frame) {
    const auto& name = model.formula.response.empty() ? frame.target_name() : model.formula.response;
    return frame.values(name);
}

gam::LambdaPolicy frozen_policy(const gam::AdditiveModel& model) {
    gam::LambdaPolicy p = model.policy;
    p.mode = gam::LambdaPolicy::Mode::Fixed;
    for (const auto& t : model.terms) {
        if (t.spec.is_smooth()) p.overrides[t.spec.label()] = t.lambda;
    }
    return p;
}

gam::AdditiveModel refit(const gam::AdditiveModel& model, const SeriesFrame& frame, const std::string& what) {
    try {
        return gam::fit(model.formula, frame, frozen_policy(model));
    } catch (const Error& e) {
        throw DataError("stacking_residuals: " + what + " too small to fit: " + e.what());
    }
}

std::vector<std::size_t> usable_rows(const SeriesFrame& frame) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < frame.size(); ++r) {
        if (frame.usable(r)) rows.push_back(r);
    }
    return rows;
}

std::string effect_column(const std::string& prefix, const std::string& effect) { return prefix + ".f_" + effect; }

bool uses_only(const gam::TermSpec& spec, const std::set<std::string>& common) {
    for (const auto& in : spec.inputs()) {
        if (!common.count(in)) return false;
    }
    return true;
}

std::vector<std::string> term_inputs(const gam::AdditiveModel& model) {
    std::vector<std::string> inputs;
    for (const auto& t : model.terms) {
        for (const auto& in : t.spec.inputs()) {
            if (std::find(inputs.begin(), inputs.end(), in) == inputs.end()) inputs.push_back(in);
        }
    }
    return inputs;
}

std::string format_level(double q) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", q);
    return buf;
}

} // namespace

// ---------------------------------------------------------------------------
// Effect transfer

std::vector<std::string> transferred_columns(const gam::AdditiveModel& source, const std::vector<std::string>& common,
                                             const std::string& prefix) {
    const std::set<std::string> c(common.begin(), common.end());
    for (const auto& name : common) {
        const bool used = std::any_of(source.terms.begin(), source.terms.end(), [&](const gam::FittedTerm& t) {
            const auto in = t.spec.inputs();
            return std::find(in.begin(), in.end(), name) != in.end();
        });
        if (!used) throw DataError("transfer: common covariate '" + name + "' is not used by the source model");
    }
    std::vector<std::string> labels;
    for (const auto& t : source.terms) {
        if (uses_only(t.spec, c)) labels.push_back(t.spec.label());
    }
    std::vector<std::string> out;
    if (labels.empty()) return out;
    for (const auto& e : gam::extract_effects(source, labels)) out.push_back(effect_column(prefix, e.name()));
    return out;
}

SeriesFrame transfer_features(const gam::AdditiveModel& source, const std::vector<std::string>& common,
                              const SeriesFrame& target, const std::string& prefix) {
    if (common.empty()) return target;
    for (const auto& name : common) {
        if (!target.has(name)) throw DataError("transfer: missing common covariate '" + name + "' in target frame");
    }
    const auto names = transferred_columns(source, common, prefix);
    const std::set<std::string> c(common.begin(), common.end());
    std::vector<std::string> labels;
    for (const auto& t : source.terms) {
        if (uses_only(t.spec, c)) labels.push_back(t.spec.label());
    }
    SeriesFrame out = target;
    if (labels.empty()) return out;
    const auto effects = gam::extract_effects(source, labels);
    for (std::size_t i = 0; i < effects.size(); ++i) {
        if (out.has(names[i])) throw DataError("transfer: column '" + names[i] + "' already exists");
        auto v = effects[i].evaluate(target);
        for (std::size_t r = 0; r < v.size(); ++r) {
            if (!target.usable(r)) v[r] = kNaN;
        }
        out.set_column(names[i], Column::numeric(std::move(v)));
    }
    return out;
}

SeriesFrame add_effect_columns(const gam::PartitionedModel& model, const SeriesFrame& frame, const std::string& prefix) {
    SeriesFrame out = frame;
    for (auto& [name, values] : model.effect_columns(frame)) {
        for (std::size_t r = 0; r < values.size(); ++r) {
            if (!frame.usable(r)) values[r] = kNaN;
        }
        out.set_column(effect_column(prefix, name), Column::numeric(std::move(values)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Residuals

std::vector<double> predict_usable(const gam::AdditiveModel& model, const SeriesFrame& frame) {
    auto out = model.predict(frame);
    for (std::size_t r = 0; r < out.size(); ++r) {
        if (!frame.usable(r)) out[r] = kNaN;
    }
    return out;
}

std::vector<double> predict_usable(const gam::PartitionedModel& model, const SeriesFrame& frame) {
    auto out = model.predict(frame);
    for (std::size_t r = 0; r < out.size(); ++r) {
        if (!frame.usable(r)) out[r] = kNaN;
    }
    return out;
}

std::vector<double> stacking_residuals(const gam::AdditiveModel& model, const SeriesFrame& frame,
                                       const ResidualSpec& spec) {
    const auto y = response_of(model, frame);
    std::vector<double> out(frame.size(), kNaN);
    const auto rows = usable_rows(frame);

    switch (spec.method) {
    case ResidualMethod::OutOfSample: {
        const auto pred = predict_usable(model, frame);
        for (std::size_t r : rows) out[r] = y[r] - pred[r];
        return out;
    }
    case ResidualMethod::BlockCv: {
        if (spec.folds < 2) throw ConfigError("stacking_residuals: block_cv needs at least 2 folds");
        const std::size_t m = rows.size();
        if (m < spec.folds) throw DataError("stacking_residuals: fold too small to fit (fewer rows than folds)");
        for (std::size_t b = 0; b < spec.folds; ++b) {
            const std::size_t lo = b * m / spec.folds, hi = (b + 1) * m / spec.folds;
            std::vector<std::size_t> train, test(rows.begin() + static_cast<long>(lo), rows.begin() + static_cast<long>(hi));
            train.insert(train.end(), rows.begin(), rows.begin() + static_cast<long>(lo));
            train.insert(train.end(), rows.begin() + static_cast<long>(hi), rows.end());
            const auto fitted = refit(model, frame.select(train), "fold " + std::to_string(b + 1));
            const auto pred = fitted.predict(frame.select(test));
            for (std::size_t i = 0; i < test.size(); ++i) out[test[i]] = y[test[i]] - pred[i];
        }
        return out;
    }
    case ResidualMethod::Online: {
        if (spec.online_start == 0) throw ConfigError("stacking_residuals: online residuals need a first refit boundary");
        std::map<std::int64_t, std::vector<std::size_t>> days;
        for (std::size_t r : rows) {
            if (frame.timestamps()[r] >= spec.online_start) days[day_of(frame.timestamps()[r], spec.utc_offset_minutes)].push_back(r);
        }
        for (const auto& [day, test] : days) {
            const Timestamp boundary = std::max(spec.online_start, day_start(day, spec.utc_offset_minutes));
            std::vector<std::size_t> train;
            for (std::size_t r : rows) {
                if (frame.timestamps()[r] < boundary) train.push_back(r);
            }
            const auto fitted = refit(model, frame.select(train), "window before " + format_iso8601(boundary));
            const auto pred = fitted.predict(frame.select(test));
            for (std::size_t i = 0; i < test.size(); ++i) out[test[i]] = y[test[i]] - pred[i];
        }
        return out;
    }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stacked GAM-RF

TransferSource fit_source(const gam::Formula& formula, const SeriesFrame& source, const std::vector<std::string>& common,
                          const gam::LambdaPolicy& policy, const std::string& prefix) {
    TransferSource s;
    s.model = std::make_shared<const gam::AdditiveModel>(gam::fit(formula, source, policy));
    s.common = common;
    s.prefix = prefix;
    return s;
}

SeriesFrame StackedModel::augment(const SeriesFrame& frame) const {
    SeriesFrame out = frame;
    for (const auto& s : sources) out = transfer_features(*s.model, s.common, out, s.prefix);
    if (target_effects) out = transfer_features(gam, term_inputs(gam), out, target_prefix);
    return out;
}

std::vector<double> StackedModel::predict_gam(const SeriesFrame& frame) const { return predict_usable(gam, frame); }

std::vector<double> StackedModel::correction(const SeriesFrame& frame) const {
    return corrector.predict_mean(augment(frame));
}

std::vector<double> StackedModel::predict_point(const SeriesFrame& frame) const {
    auto out = predict_gam(frame);
    const auto c = correction(frame);
    for (std::size_t r = 0; r < out.size(); ++r) out[r] += c[r];
    return out;
}

std::vector<double> StackedModel::predict_quantile(const SeriesFrame& frame, double q) const {
    auto out = predict_gam(frame);
    const auto c = corrector.predict_quantile(augment(frame), q);
    for (std::size_t r = 0; r < out.size(); ++r) out[r] += c[r];
    return out;
}

StackedModel fit_stacked(const std::vector<TransferSource>& sources, const gam::Formula& target_formula,
                         const SeriesFrame& target, const StackedConfig& config) {
    for (double q : config.quantiles) {
        if (!(q > 0.0 && q < 1.0)) throw ConfigError("fit_stacked: quantile levels must lie in (0, 1)");
    }
    StackedModel m;
    m.sources = sources;
    m.target_effects = config.target_effects;
    m.target_prefix = config.target_prefix;
    m.quantiles = config.quantiles;
    m.residuals = config.residuals;
    m.gam = gam::fit(target_formula, target, config.policy);

    // step 1: features; step 2: residuals; step 3: corrector
    SeriesFrame train = m.augment(target);
    const auto resid = stacking_residuals(m.gam, target, config.residuals);

    std::vector<std::string> features;
    auto add = [&](const std::string& name) {
        if (std::find(features.begin(), features.end(), name) == features.end()) features.push_back(name);
    };
    for (const auto& c : config.covariates) add(c);
    for (const auto& s : sources) {
        for (const auto& c : transferred_columns(*s.model, s.common, s.prefix)) add(c);
    }
    if (config.target_effects) {
        for (const auto& c : transferred_columns(m.gam, term_inputs(m.gam), config.target_prefix)) add(c);
    }
    if (features.empty()) throw ConfigError("fit_stacked: the corrector has no input features");
    m.forest_features = features;

    train.set_column("resid", Column::numeric(resid));
    for (std::size_t r = 0; r < train.size(); ++r) {
        if (!std::isfinite(resid[r])) train.mark_unusable(r);
    }
    m.corrector = forest::fit_forest(train, "resid", features, config.forest);
    return m;
}

// ---------------------------------------------------------------------------
// Expert panel

std::size_t ExpertPanel::zone_index(const std::string& zone) const {
    const auto it = std::find(zones.begin(), zones.end(), zone);
    if (it == zones.end()) throw DataError("panel has no zone '" + zone + "'");
    return static_cast<std::size_t>(it - zones.begin());
}

std::size_t ExpertPanel::expert_index(const std::string& expert) const {
    const auto it = std::find(experts.begin(), experts.end(), expert);
    if (it == experts.end()) throw DataError("panel has no expert '" + expert + "'");
    return static_cast<std::size_t>(it - experts.begin());
}

const std::vector<double>& ExpertPanel::stream(const std::string& zone, const std::string& expert) const {
    return values[zone_index(zone)][expert_index(expert)];
}

std::vector<std::string> expert_names(const std::vector<double>& quantiles) {
    std::vector<std::string> names = {"gam"};
    for (double q : quantiles) names.push_back("ind.q" + format_level(q));
    for (double q : quantiles) names.push_back("com.q" + format_level(q));
    return names;
}

SeriesFrame stack_rows(const std::vector<const SeriesFrame*>& frames, const std::vector<std::string>& columns,
                       const std::string& target) {
    std::vector<double> y;
    std::vector<bool> usable;
    for (const auto* f : frames) {
        const auto v = f->values(target);
        y.insert(y.end(), v.begin(), v.end());
        for (std::size_t r = 0; r < f->size(); ++r) usable.push_back(f->usable(r));
    }
    std::vector<Timestamp> ts(y.size());
    for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = static_cast<Timestamp>(i) * kHalfHour;
    SeriesFrame out("stacked", std::move(ts), kHalfHour, target, std::move(y));
    for (std::size_t r = 0; r < usable.size(); ++r) {
        if (!usable[r]) out.mark_unusable(r);
    }
    for (const auto& name : columns) {
        if (name == target) continue;
        const bool categorical = frames.front()->column(name).categorical();
        if (categorical) {
            std::vector<std::string> labels;
            std::set<std::string> level_set;
            for (const auto* f : frames) {
                const Column& c = f->column(name);
                for (const auto& l : c.levels) level_set.insert(l);
                for (std::size_t r = 0; r < f->size(); ++r) labels.push_back(c.label(r));
            }
            // keep the declared level order of the first frame when possible
            std::vector<std::string> levels = frames.front()->column(name).levels;
            for (const auto& l : level_set) {
                if (std::find(levels.begin(), levels.end(), l) == levels.end()) levels.push_back(l);
            }
            std::vector<double> codes(labels.size());
            for (std::size_t i = 0; i < labels.size(); ++i) {
                codes[i] = static_cast<double>(std::find(levels.begin(), levels.end(), labels[i]) - levels.begin());
            }
            out.set_column(name, Column::categorical_codes(std::move(codes), std::move(levels)));
        } else {
            std::vector<double> v;
            for (const auto* f : frames) {
                const auto c = f->values(name);
                v.insert(v.end(), c.begin(), c.end());
            }
            out.set_column(name, Column::numeric(std::move(v)));
        }
    }
    return out;
}

ExpertPanel build_expert_panel(const std::map<std::string, SeriesFrame>& zones, const SeriesFrame& global,
                               const PanelConfig& config, PanelArtifacts* artifacts) {
    if (config.source_end <= config.source_begin) throw ConfigError("expert panel: empty source window");
    if (config.target_begin < config.source_end) throw ConfigError("expert panel: target window overlaps the source window");
    for (double q : config.quantiles) {
        if (!(q > 0.0 && q < 1.0)) throw ConfigError("expert panel: quantile levels must lie in (0, 1)");
    }
    const auto formula = gam::parse_formula(config.formula);

    ExpertPanel panel;
    std::vector<const SeriesFrame*> frames;
    for (const auto& [name, frame] : zones) {
        if (name == kGlobalZone) throw ConfigError("expert panel: zone name '" + kGlobalZone + "' is reserved");
        if (frame.timestamps() != global.timestamps()) {
            throw DataError("expert panel: zone '" + name + "' is not aligned with the global series");
        }
        panel.zones.push_back(name);
        frames.push_back(&frame);
    }
    panel.zones.push_back(kGlobalZone);
    frames.push_back(&global);
    const std::size_t nz = panel.zones.size();
    panel.experts = expert_names(config.quantiles);
    const std::size_t nq = config.quantiles.size();

    // Panel rows.
    const Timestamp begin = config.panel_begin ? config.panel_begin : config.source_end;
    const Timestamp end = config.panel_end ? config.panel_end : std::numeric_limits<Timestamp>::max();
    std::vector<std::size_t> panel_rows;
    for (std::size_t r = 0; r < global.size(); ++r) {
        const Timestamp t = global.timestamps()[r];
        if (t >= begin && t < end) panel_rows.push_back(r);
    }
    for (std::size_t r : panel_rows) panel.timestamps.push_back(global.timestamps()[r]);

    // GAMs on the source window and their effects.
    PanelArtifacts local;
    PanelArtifacts& art = artifacts ? *artifacts : local;
    std::vector<SeriesFrame> aug(nz);
    std::vector<std::vector<double>> gam_pred(nz);
    double max_load = 0.0;
    for (std::size_t z = 0; z < nz; ++z) {
        const SeriesFrame& frame = *frames[z];
        for (const auto& name : config.forest_covariates) {
            if (!frame.has(name)) throw DataError("expert panel: zone '" + panel.zones[z] + "' lacks covariate '" + name + "'");
        }
        const SeriesFrame source = frame.window(config.source_begin, config.source_end);
        if (source.usable_count() == 0) throw DataError("expert panel: zone '" + panel.zones[z] + "' has no source rows");
        for (std::size_t r = 0; r < source.size(); ++r) {
            if (source.usable(r)) max_load = std::max(max_load, source.target()[r]);
        }
        auto pm = gam::PartitionedModel::fit(formula, source, config.partition_column, config.policy);
        gam_pred[z] = predict_usable(pm, frame);
        SeriesFrame a = config.transfer_effects ? add_effect_columns(pm, frame, "src") : frame;
        std::vector<double> resid(frame.size(), kNaN);
        for (std::size_t r = 0; r < frame.size(); ++r) resid[r] = frame.target()[r] - gam_pred[z][r];
        a.set_column("resid", Column::numeric(std::move(resid)));
        std::vector<double> codes(frame.size(), static_cast<double>(z));
        a.set_column(config.zone_column, Column::categorical_codes(std::move(codes), panel.zones));
        aug[z] = std::move(a);
        art.gams.emplace(panel.zones[z], std::move(pm));
    }
    panel.bound = config.clip_factor * max_load;

    std::vector<std::string> features = config.forest_covariates;
    if (config.transfer_effects) {
        for (const auto& name : aug.back().column_names()) {
            if (name.rfind("src.f_", 0) == 0) features.push_back(name);
        }
        for (std::size_t z = 0; z + 1 < nz; ++z) {
            for (const auto& name : aug[z].column_names()) {
                if (name.rfind("src.f_", 0) == 0 && std::find(features.begin(), features.end(), name) == features.end()) {
                    throw DataError("expert panel: effect '" + name + "' of zone '" + panel.zones[z] +
                                    "' is missing at the global level");
                }
            }
        }
    }
    if (features.empty()) throw ConfigError("expert panel: forests have no input features");
    std::vector<std::string> common_features = features;
    common_features.push_back(config.zone_column);
    art.forest_features = features;

    // Values.
    panel.values.assign(nz, std::vector<std::vector<double>>(panel.experts.size(), std::vector<double>(panel_rows.size(), kNaN)));
    panel.outcomes.assign(nz, std::vector<double>(panel_rows.size()));
    for (std::size_t z = 0; z < nz; ++z) {
        for (std::size_t i = 0; i < panel_rows.size(); ++i) {
            panel.values[z][0][i] = gam_pred[z][panel_rows[i]];
            panel.outcomes[z][i] = frames[z]->target()[panel_rows[i]];
        }
    }

    // Daily forest refits over the target period.
    std::map<std::int64_t, std::vector<std::size_t>> days; // day -> positions in panel_rows
    for (std::size_t i = 0; i < panel_rows.size(); ++i) {
        days[day_of(panel.timestamps[i], config.utc_offset_minutes)].push_back(i);
    }
    std::vector<std::size_t> last_count(nz + 1, 0);
    std::vector<std::optional<forest::QuantileForest>> indiv(nz);
    std::optional<forest::QuantileForest> common;
    for (const auto& [day, positions] : days) {
        const Timestamp boundary = day_start(day, config.utc_offset_minutes);
        if (boundary < config.target_begin) continue;
        std::vector<SeriesFrame> train(nz);
        std::size_t total = 0;
        for (std::size_t z = 0; z < nz; ++z) {
            const SeriesFrame window = aug[z].window(config.target_begin, boundary);
            std::vector<std::size_t> keep;
            const auto resid = window.values("resid");
            for (std::size_t r = 0; r < window.size(); ++r) {
                if (window.usable(r) && std::isfinite(resid[r])) keep.push_back(r);
            }
            train[z] = window.select(keep);
            total += keep.size();
        }
        for (std::size_t z = 0; z < nz; ++z) {
            const std::size_t n = train[z].size();
            if (n < config.min_forest_rows) continue;
            if (n != last_count[z]) {
                auto cfg = config.forest;
                cfg.seed = forest::mix_seed(config.forest.seed ^ forest::mix_seed(static_cast<std::uint64_t>(day) * 1009 + z));
                indiv[z] = forest::fit_forest(train[z], "resid", features, cfg);
                last_count[z] = n;
                ++art.refits;
            }
        }
        if (total >= config.min_forest_rows && total != last_count[nz]) {
            std::vector<const SeriesFrame*> parts;
            for (const auto& t : train) parts.push_back(&t);
            const SeriesFrame stacked = stack_rows(parts, common_features, "resid");
            auto cfg = config.forest;
            cfg.seed = forest::mix_seed(config.forest.seed ^ forest::mix_seed(static_cast<std::uint64_t>(day) * 1009 + nz));
            common = forest::fit_forest(stacked, "resid", common_features, cfg);
            last_count[nz] = total;
            ++art.refits;
        }

        std::vector<std::size_t> rows;
        for (std::size_t i : positions) rows.push_back(panel_rows[i]);
        for (std::size_t z = 0; z < nz; ++z) {
            const SeriesFrame today = aug[z].select(rows);
            if (indiv[z]) {
                const auto q = indiv[z]->predict_quantiles(today, config.quantiles);
                for (std::size_t k = 0; k < nq; ++k) {
                    for (std::size_t j = 0; j < positions.size(); ++j) {
                        panel.values[z][1 + k][positions[j]] = panel.values[z][0][positions[j]] + q[k][j];
                    }
                }
            }
            if (common) {
                const auto q = common->predict_quantiles(today, config.quantiles);
                for (std::size_t k = 0; k < nq; ++k) {
                    for (std::size_t j = 0; j < positions.size(); ++j) {
                        panel.values[z][1 + nq + k][positions[j]] = panel.values[z][0][positions[j]] + q[k][j];
                    }
                }
            }
        }
    }

    for (auto& zone : panel.values) {
        for (auto& stream : zone) {
            for (double& v : stream) {
                if (!std::isnan(v)) v = std::clamp(v, 0.0, panel.bound);
            }
        }
    }
    for (std::size_t z = 0; z < nz; ++z) {
        if (indiv[z]) art.individual.emplace(panel.zones[z], std::move(*indiv[z]));
        art.frames.emplace(panel.zones[z], std::move(aug[z]));
    }
    art.common = std::move(common);
    return panel;
}

void write_panel_csv(const ExpertPanel& panel, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "timestamp,zone,expert,value\n";
    char buf[40];
    for (std::size_t i = 0; i < panel.size(); ++i) {
        const auto ts = format_iso8601(panel.timestamps[i]);
        for (std::size_t z = 0; z < panel.zones.size(); ++z) {
            for (std::size_t e = 0; e < panel.experts.size(); ++e) {
                std::snprintf(buf, sizeof buf, "%.17g", panel.values[z][e][i]);
                out << ts << ',' << panel.zones[z] << ',' << panel.experts[e] << ',' << buf << '\n';
            }
            std::snprintf(buf, sizeof buf, "%.17g", panel.outcomes[z][i]);
            out << ts << ',' << panel.zones[z] << ",observed," << buf << '\n';
        }
    }
}

ExpertPanel read_panel_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line.rfind("timestamp,zone,expert,value", 0) != 0) throw DataError("'" + path + "': not a panel CSV");
    struct Entry {
        Timestamp t;
        std::string zone, expert;
        double value;
    };
    std::vector<Entry> entries;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string ts, zone, expert, value;
        std::getline(ss, ts, ',');
        std::getline(ss, zone, ',');
        std::getline(ss, expert, ',');
        std::getline(ss, value, ',');
        double v;
        try {
            v = std::stod(value);
        } catch (const std::exception&) {
            throw DataError("'" + path + "': bad value '" + value + "'");
        }
        entries.push_back({parse_iso8601(ts), zone, expert, v});
    }
    ExpertPanel p;
    for (const auto& e : entries) {
        if (p.timestamps.empty() || p.timestamps.back() != e.t) {
            if (!p.timestamps.empty() && e.t < p.timestamps.back()) throw DataError("'" + path + "': timestamps out of order");
            p.timestamps.push_back(e.t);
        }
        if (std::find(p.zones.begin(), p.zones.end(), e.zone) == p.zones.end()) p.zones.push_back(e.zone);
        if (e.expert != "observed" && std::find(p.experts.begin(), p.experts.end(), e.expert) == p.experts.end()) {
            p.experts.push_back(e.expert);
        }
    }
    p.values.assign(p.zones.size(), std::vector<std::vector<double>>(p.experts.size(), std::vector<double>(p.timestamps.size(), kNaN)));
    p.outcomes.assign(p.zones.size(), std::vector<double>(p.timestamps.size(), kNaN));
    std::size_t row = 0;
    for (const auto& e : entries) {
        while (p.timestamps[row] != e.t) ++row;
        const std::size_t z = p.zone_index(e.zone);
        if (e.expert == "observed") {
            p.outcomes[z][row] = e.value;
        } else {
            p.values[z][p.expert_index(e.expert)][row] = e.value;
        }
    }
    return p;
}

} // namespace hierforecast::transfer
