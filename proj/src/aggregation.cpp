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

#include "hierforecast/aggregation.hpp"

#include "hierforecast/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace hierforecast::aggregation {

namespace {

std::vector<double> weights_of(const MlPolyState& s) {
    const std::size_t n = s.size();
    std::vector<double> p(n, 0.0);
    double total = 0.0;
    std::size_t active = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (!s.active[j]) continue;
        ++active;
        p[j] = s.eta[j] * std::max(s.regret[j], 0.0);
        total += p[j];
    }
    if (active == 0) return p;
    for (std::size_t j = 0; j < n; ++j) {
        if (!s.active[j]) continue;
        p[j] = total > 0.0 ? p[j] / total : 1.0 / static_cast<double>(active);
    }
    return p;
}

void activate(MlPolyState& s, std::size_t j) {
    s.active[j] = true;
    s.regret[j] = 0.0;
    s.squared[j] = 0.0;
    s.eta[j] = 1.0;
}

void update(MlPolyState& s, std::size_t j, double r) {
    s.regret[j] += r;
    s.squared[j] += r * r;
    s.eta[j] = 1.0 / (1.0 + s.squared[j]);
}

double gradient(double prediction, double outcome) { return 2.0 * (prediction - outcome); }

std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Scalar {
    std::vector<double> prediction;
    WeightTrace trace;
};

// Scalar ML-Poly over the given streams.
Scalar aggregate(const std::string& name, std::vector<std::string> experts,
                 const std::vector<const std::vector<double>*>& streams, const std::vector<double>& outcomes,
                 LossMode loss, const std::vector<Timestamp>& ts) {
    Scalar out;
    out.trace.aggregator = name;
    out.trace.experts = std::move(experts);
    MlPolyState state = MlPolyState::dormant(streams.size(), loss);
    std::vector<double> f(streams.size());
    for (std::size_t t = 0; t < outcomes.size(); ++t) {
        for (std::size_t j = 0; j < streams.size(); ++j) f[j] = (*streams[j])[t];
        StepResult r;
        try {
            r = mlpoly_step(state, f, outcomes[t]);
        } catch (const DataError& e) {
            throw DataError(name + " at " + format_iso8601(ts[t]) + ": " + e.what());
        }
        out.prediction.push_back(r.prediction);
        out.trace.weights.push_back(std::move(r.weights));
        state = std::move(r.state);
    }
    return out;
}

std::vector<double> combine(const WeightTrace& trace, const std::vector<const std::vector<double>*>& streams) {
    if (trace.experts.size() != streams.size()) {
        throw DataError("replay: trace '" + trace.aggregator + "' does not match the panel");
    }
    std::vector<double> out(trace.weights.size());
    for (std::size_t t = 0; t < out.size(); ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < streams.size(); ++j) {
            const double f = (*streams[j])[t];
            if (!std::isnan(f)) s += trace.weights[t][j] * f;
        }
        out[t] = s;
    }
    return out;
}

const WeightTrace& find_trace(const std::vector<WeightTrace>& traces, const std::string& name) {
    for (const auto& t : traces) {
        if (t.aggregator == name) return t;
    }
    throw DataError("replay: missing weight trace '" + name + "'");
}

std::vector<double> means_of(const NormalizationTable& table, const std::string& zone, const std::vector<Timestamp>& ts) {
    if (!table.has_zone(zone)) throw DataError("no normalization mean for zone '" + zone + "'");
    std::vector<double> m(ts.size());
    for (std::size_t t = 0; t < ts.size(); ++t) m[t] = table.mean(zone, ts[t]);
    return m;
}

// Zones aggregated by the inner stage of hierarchical strategies.
std::vector<std::size_t> bottom_zones(const transfer::ExpertPanel& panel) {
    const std::size_t g = panel.zone_index(transfer::kGlobalZone);
    std::vector<std::size_t> out;
    for (std::size_t z = 0; z < panel.zones.size(); ++z) {
        if (z != g) out.push_back(z);
    }
    return out;
}

std::vector<const std::vector<double>*> zone_streams(const transfer::ExpertPanel& panel, std::size_t z) {
    std::vector<const std::vector<double>*> s;
    for (const auto& v : panel.values[z]) s.push_back(&v);
    return s;
}

std::vector<std::string> qualified(const std::string& zone, const std::vector<std::string>& experts) {
    std::vector<std::string> out;
    for (const auto& e : experts) out.push_back(zone + "." + e);
    return out;
}

void check_panel(const transfer::ExpertPanel& panel) {
    if (panel.values.size() != panel.zones.size() || panel.outcomes.size() != panel.zones.size()) {
        throw DataError("panel: zone dimensions disagree");
    }
    for (std::size_t z = 0; z < panel.zones.size(); ++z) {
        if (panel.values[z].size() != panel.experts.size()) throw DataError("panel: missing expert streams in zone '" + panel.zones[z] + "'");
        for (const auto& s : panel.values[z]) {
            if (s.size() != panel.size()) throw DataError("panel: expert stream not aligned in zone '" + panel.zones[z] + "'");
        }
        if (panel.outcomes[z].size() != panel.size()) throw DataError("panel: outcomes not aligned in zone '" + panel.zones[z] + "'");
    }
}

} // namespace

MlPolyState MlPolyState::create(std::size_t n, LossMode loss) {
    MlPolyState s;
    s.regret.assign(n, 0.0);
    s.squared.assign(n, 0.0);
    s.eta.assign(n, 1.0);
    s.active.assign(n, true);
    s.loss = loss;
    return s;
}

MlPolyState MlPolyState::dormant(std::size_t n, LossMode loss) {
    MlPolyState s = create(n, loss);
    s.active.assign(n, false);
    return s;
}

std::vector<double> MlPolyState::weights() const { return weights_of(*this); }

StepResult mlpoly_step(const MlPolyState& state, std::span<const double> forecasts, double outcome) {
    if (forecasts.size() != state.size()) throw DataError("mlpoly_step: expected " + std::to_string(state.size()) + " forecasts");
    if (!std::isfinite(outcome)) throw DataError("mlpoly_step: outcome is not finite");
    StepResult r;
    r.state = state;
    MlPolyState& s = r.state;
    std::size_t active = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
        const bool finite = std::isfinite(forecasts[j]);
        if (s.active[j] && !finite) throw DataError("mlpoly_step: forecast of expert " + std::to_string(j) + " is missing");
        if (!s.active[j] && finite) activate(s, j);
        active += s.active[j];
    }
    if (active == 0) throw DataError("mlpoly_step: no expert available");

    r.weights = weights_of(s);
    double yhat = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
        if (s.active[j]) yhat += r.weights[j] * forecasts[j];
    }
    r.prediction = yhat;

    const double g = gradient(yhat, outcome);
    const double own = (outcome - yhat) * (outcome - yhat);
    for (std::size_t j = 0; j < s.size(); ++j) {
        if (!s.active[j]) continue;
        const double rj = s.loss == LossMode::Gradient
                              ? g * (yhat - forecasts[j])
                              : own - (outcome - forecasts[j]) * (outcome - forecasts[j]);
        update(s, j, rj);
    }
    return r;
}

VectorStepResult mlpoly_vector_step(const MlPolyState& state, const std::vector<std::vector<double>>& forecasts,
                                    std::span<const double> outcomes) {
    if (forecasts.size() != state.size()) throw DataError("mlpoly_vector_step: expected " + std::to_string(state.size()) + " vector experts");
    const std::size_t dim = outcomes.size();
    for (const auto& f : forecasts) {
        if (f.size() != dim) throw DataError("mlpoly_vector_step: expert dimension does not match the outcome");
    }
    for (double y : outcomes) {
        if (!std::isfinite(y)) throw DataError("mlpoly_vector_step: outcome is not finite");
    }
    VectorStepResult r;
    r.state = state;
    MlPolyState& s = r.state;
    std::size_t active = 0;
    for (std::size_t m = 0; m < s.size(); ++m) {
        const bool finite = std::all_of(forecasts[m].begin(), forecasts[m].end(), [](double v) { return std::isfinite(v); });
        if (s.active[m] && !finite) throw DataError("mlpoly_vector_step: forecast of expert " + std::to_string(m) + " is missing");
        if (!s.active[m] && finite) activate(s, m);
        active += s.active[m];
    }
    if (active == 0) throw DataError("mlpoly_vector_step: no expert available");

    r.weights = weights_of(s);
    r.prediction.assign(dim, 0.0);
    for (std::size_t z = 0; z < dim; ++z) {
        for (std::size_t m = 0; m < s.size(); ++m) {
            if (s.active[m]) r.prediction[z] += r.weights[m] * forecasts[m][z];
        }
    }
    for (std::size_t m = 0; m < s.size(); ++m) {
        if (!s.active[m]) continue;
        double rm = 0.0;
        for (std::size_t z = 0; z < dim; ++z) {
            const double yhat = r.prediction[z], y = outcomes[z], f = forecasts[m][z];
            rm += s.loss == LossMode::Gradient ? gradient(yhat, y) * (yhat - f) : (y - yhat) * (y - yhat) - (y - f) * (y - f);
        }
        update(s, m, rm);
    }
    return r;
}

// ---------------------------------------------------------------------------

std::string to_string(StrategyKind kind) {
    switch (kind) {
    case StrategyKind::FullDisaggregated: return "full_disaggregated";
    case StrategyKind::Vectorial: return "vectorial";
    case StrategyKind::HierarchicalScaled: return "hierarchical_scaled";
    case StrategyKind::HierarchicalUnscaled: return "hierarchical_unscaled";
    }
    return "";
}

StrategyKind parse_strategy(const std::string& name) {
    for (auto k : kAllStrategies) {
        if (to_string(k) == name) return k;
    }
    throw ConfigError("unknown strategy '" + name + "'");
}

StrategyResult run_strategy(const StrategyConfig& config, const transfer::ExpertPanel& panel,
                            const NormalizationTable& table) {
    check_panel(panel);
    const auto& ts = panel.timestamps;
    const std::size_t g = panel.zone_index(transfer::kGlobalZone);
    const auto global_mean = means_of(table, transfer::kGlobalZone, ts);

    StrategyResult res;
    res.strategy = to_string(config.kind);
    res.timestamps = ts;
    res.actual.resize(ts.size());
    for (std::size_t t = 0; t < ts.size(); ++t) res.actual[t] = panel.outcomes[g][t] * global_mean[t];

    auto scale_global = [&](const std::vector<double>& normalized) {
        res.forecast.resize(ts.size());
        for (std::size_t t = 0; t < ts.size(); ++t) res.forecast[t] = normalized[t] * global_mean[t];
    };

    switch (config.kind) {
    case StrategyKind::FullDisaggregated: {
        std::vector<const std::vector<double>*> streams;
        std::vector<std::string> names;
        for (std::size_t z = 0; z < panel.zones.size(); ++z) {
            for (auto* s : zone_streams(panel, z)) streams.push_back(s);
            for (auto& n : qualified(panel.zones[z], panel.experts)) names.push_back(std::move(n));
        }
        auto run = aggregate("full", std::move(names), streams, panel.outcomes[g], config.loss, ts);
        scale_global(run.prediction);
        res.traces.push_back(std::move(run.trace));
        break;
    }
    case StrategyKind::Vectorial: {
        const std::size_t nz = panel.zones.size(), ne = panel.experts.size();
        MlPolyState state = MlPolyState::dormant(ne, config.loss);
        WeightTrace trace{"vector", panel.experts, {}};
        std::vector<std::vector<double>> f(ne, std::vector<double>(nz));
        std::vector<double> y(nz), normalized(ts.size());
        for (std::size_t t = 0; t < ts.size(); ++t) {
            for (std::size_t m = 0; m < ne; ++m) {
                for (std::size_t z = 0; z < nz; ++z) f[m][z] = panel.values[z][m][t];
            }
            for (std::size_t z = 0; z < nz; ++z) y[z] = panel.outcomes[z][t];
            VectorStepResult r;
            try {
                r = mlpoly_vector_step(state, f, y);
            } catch (const DataError& e) {
                throw DataError("vector at " + format_iso8601(ts[t]) + ": " + e.what());
            }
            normalized[t] = r.prediction[g];
            trace.weights.push_back(std::move(r.weights));
            state = std::move(r.state);
        }
        scale_global(normalized);
        res.traces.push_back(std::move(trace));
        break;
    }
    case StrategyKind::HierarchicalScaled:
    case StrategyKind::HierarchicalUnscaled: {
        const bool scaled = config.kind == StrategyKind::HierarchicalScaled;
        auto bottom = bottom_zones(panel);
        // without zones the global level is its own bottom
        if (bottom.empty() && !scaled) bottom.push_back(g);
        std::vector<std::vector<double>> inner(bottom.size());
        for (std::size_t i = 0; i < bottom.size(); ++i) {
            const std::size_t z = bottom[i];
            auto run = aggregate("inner." + panel.zones[z], panel.experts, zone_streams(panel, z), panel.outcomes[z],
                                 config.inner_loss, ts);
            inner[i] = std::move(run.prediction);
            res.traces.push_back(std::move(run.trace));
        }
        if (scaled) {
            std::vector<const std::vector<double>*> streams;
            std::vector<std::string> names;
            for (std::size_t i = 0; i < bottom.size(); ++i) {
                streams.push_back(&inner[i]);
                names.push_back("inner." + panel.zones[bottom[i]]);
            }
            for (auto* s : zone_streams(panel, g)) streams.push_back(s);
            for (auto& n : qualified(panel.zones[g], panel.experts)) names.push_back(std::move(n));
            auto run = aggregate("outer", std::move(names), streams, panel.outcomes[g], config.loss, ts);
            scale_global(run.prediction);
            res.traces.push_back(std::move(run.trace));
            for (std::size_t i = 0; i < bottom.size(); ++i) {
                const auto m = means_of(table, panel.zones[bottom[i]], ts);
                auto& zf = res.zone_forecasts[panel.zones[bottom[i]]];
                zf.resize(ts.size());
                for (std::size_t t = 0; t < ts.size(); ++t) zf[t] = inner[i][t] * m[t];
            }
        } else {
            res.forecast.assign(ts.size(), 0.0);
            for (std::size_t i = 0; i < bottom.size(); ++i) {
                const auto m = means_of(table, panel.zones[bottom[i]], ts);
                auto& zf = res.zone_forecasts[panel.zones[bottom[i]]];
                zf.resize(ts.size());
                for (std::size_t t = 0; t < ts.size(); ++t) {
                    zf[t] = inner[i][t] * m[t];
                    res.forecast[t] += zf[t];
                }
            }
        }
        break;
    }
    }
    return res;
}

std::vector<double> replay(StrategyKind kind, const transfer::ExpertPanel& panel, const NormalizationTable& table,
                           const std::vector<WeightTrace>& traces) {
    check_panel(panel);
    const auto& ts = panel.timestamps;
    const std::size_t g = panel.zone_index(transfer::kGlobalZone);
    const auto global_mean = means_of(table, transfer::kGlobalZone, ts);
    std::vector<double> normalized;

    switch (kind) {
    case StrategyKind::FullDisaggregated: {
        std::vector<const std::vector<double>*> streams;
        for (std::size_t z = 0; z < panel.zones.size(); ++z) {
            for (auto* s : zone_streams(panel, z)) streams.push_back(s);
        }
        normalized = combine(find_trace(traces, "full"), streams);
        break;
    }
    case StrategyKind::Vectorial: {
        const auto& trace = find_trace(traces, "vector");
        if (trace.experts.size() != panel.experts.size()) throw DataError("replay: trace 'vector' does not match the panel");
        normalized.assign(trace.weights.size(), 0.0);
        for (std::size_t t = 0; t < normalized.size(); ++t) {
            for (std::size_t m = 0; m < panel.experts.size(); ++m) {
                bool finite = true;
                for (std::size_t z = 0; z < panel.zones.size(); ++z) finite = finite && std::isfinite(panel.values[z][m][t]);
                if (finite) normalized[t] += trace.weights[t][m] * panel.values[g][m][t];
            }
        }
        break;
    }
    case StrategyKind::HierarchicalScaled:
    case StrategyKind::HierarchicalUnscaled: {
        const bool scaled = kind == StrategyKind::HierarchicalScaled;
        auto bottom = bottom_zones(panel);
        if (bottom.empty() && !scaled) bottom.push_back(g);
        std::vector<std::vector<double>> inner;
        for (std::size_t z : bottom) inner.push_back(combine(find_trace(traces, "inner." + panel.zones[z]), zone_streams(panel, z)));
        if (!scaled) {
            std::vector<double> out(ts.size(), 0.0);
            for (std::size_t i = 0; i < bottom.size(); ++i) {
                const auto m = means_of(table, panel.zones[bottom[i]], ts);
                for (std::size_t t = 0; t < ts.size(); ++t) out[t] += inner[i][t] * m[t];
            }
            return out;
        }
        std::vector<const std::vector<double>*> streams;
        for (const auto& s : inner) streams.push_back(&s);
        for (auto* s : zone_streams(panel, g)) streams.push_back(s);
        normalized = combine(find_trace(traces, "outer"), streams);
        break;
    }
    }
    if (normalized.size() != ts.size()) throw DataError("replay: trace length does not match the panel");
    for (std::size_t t = 0; t < ts.size(); ++t) normalized[t] *= global_mean[t];
    return normalized;
}

void write_forecasts_csv(const std::vector<StrategyResult>& results, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "timestamp,strategy,forecast_MW\n";
    for (const auto& r : results) {
        for (std::size_t t = 0; t < r.timestamps.size(); ++t) {
            out << format_iso8601(r.timestamps[t]) << ',' << r.strategy << ',' << format_number(r.forecast[t]) << '\n';
        }
    }
}

void write_weights_csv(const std::vector<StrategyResult>& results, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "timestamp,strategy,expert,weight\n";
    for (const auto& r : results) {
        for (const auto& trace : r.traces) {
            for (std::size_t t = 0; t < trace.weights.size(); ++t) {
                const auto ts = format_iso8601(r.timestamps[t]);
                for (std::size_t j = 0; j < trace.experts.size(); ++j) {
                    out << ts << ',' << r.strategy << ',' << trace.aggregator << '/' << trace.experts[j] << ','
                        << format_number(trace.weights[t][j]) << '\n';
                }
            }
        }
    }
}

std::vector<WeightTrace> read_weights_csv(const std::string& path, const std::string& strategy) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line.rfind("timestamp,strategy,expert,weight", 0) != 0) throw DataError("'" + path + "': not a weight trace");
    std::vector<WeightTrace> traces;
    std::vector<std::string> last_ts; // per trace, timestamp of the current row
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string ts, strat, expert, weight;
        std::getline(ss, ts, ',');
        std::getline(ss, strat, ',');
        std::getline(ss, expert, ',');
        std::getline(ss, weight, ',');
        if (strat != strategy) continue;
        const auto slash = expert.find('/');
        if (slash == std::string::npos) throw DataError("'" + path + "': bad expert name '" + expert + "'");
        const std::string agg = expert.substr(0, slash), name = expert.substr(slash + 1);
        auto it = std::find_if(traces.begin(), traces.end(), [&](const WeightTrace& t) { return t.aggregator == agg; });
        if (it == traces.end()) {
            traces.push_back({agg, {}, {}});
            last_ts.emplace_back();
            it = traces.end() - 1;
        }
        const std::size_t k = static_cast<std::size_t>(it - traces.begin());
        if (ts != last_ts[k]) {
            it->weights.emplace_back();
            last_ts[k] = ts;
        }
        if (it->weights.size() == 1) it->experts.push_back(name);
        it->weights.back().push_back(std::stod(weight));
    }
    return traces;
}

} // namespace hierforecast::aggregation
