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

#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace hierforecast::harness {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void only_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : j.items()) {
        if (!ok.count(key)) {
            std::string list;
            for (const auto& a : ok) list += (list.empty() ? "" : ", ") + a;
            throw ConfigError("config: unknown key '" + key + "' in section '" + section + "' (expected one of: " + list + ")");
        }
    }
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

Timestamp read_time(const json& j, const char* key, Timestamp fallback = 0) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_string()) throw ConfigError(std::string("config: '") + key + "' must be an ISO-8601 date string");
    try {
        return parse_iso8601(v.get<std::string>());
    } catch (const Error& e) {
        throw ConfigError(std::string("config: '") + key + "': " + e.what());
    }
}

std::string resolve(const std::string& base, const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(base) / path).lexically_normal().string();
}

aggregation::LossMode read_loss(const json& j, const char* key, aggregation::LossMode fallback) {
    if (!j.contains(key)) return fallback;
    const auto s = j.at(key).get<std::string>();
    if (s == "gradient") return aggregation::LossMode::Gradient;
    if (s == "raw") return aggregation::LossMode::Raw;
    throw ConfigError(std::string("config: '") + key + "' must be \"gradient\" or \"raw\", got \"" + s + "\"");
}

forest::ForestConfig read_forest(const json& j) {
    only_keys(j, "experts.forest", {"n_trees", "mtry", "min_node_size", "max_depth", "sample_fraction", "threads"});
    forest::ForestConfig c;
    read(j, "n_trees", c.n_trees);
    read(j, "mtry", c.mtry);
    read(j, "min_node_size", c.min_node_size);
    read(j, "max_depth", c.max_depth);
    read(j, "sample_fraction", c.sample_fraction);
    read(j, "threads", c.threads);
    return c;
}

transfer::ResidualSpec read_residuals(const json& j) {
    only_keys(j, "models.residuals", {"method", "folds", "online_start"});
    transfer::ResidualSpec r;
    const auto method = j.value("method", std::string("block_cv"));
    if (method == "block_cv") {
        r.method = transfer::ResidualMethod::BlockCv;
    } else if (method == "online") {
        r.method = transfer::ResidualMethod::Online;
    } else if (method == "out_of_sample") {
        r.method = transfer::ResidualMethod::OutOfSample;
    } else {
        throw ConfigError("config: models.residuals.method must be block_cv, online or out_of_sample");
    }
    read(j, "folds", r.folds);
    r.online_start = read_time(j, "online_start");
    return r;
}

void check_formula(const std::string& text, const std::string& where) {
    try {
        gam::parse_formula(text);
    } catch (const ConfigError& e) {
        throw ConfigError("config: " + where + ": " + e.what());
    }
}

void check_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw ConfigError("config: " + what + " is required");
    if (!fs::exists(path)) throw ConfigError("config: " + what + " '" + path + "' does not exist");
}

} // namespace

std::string to_string(PipelineKind kind) {
    switch (kind) {
    case PipelineKind::Synthetic: return "synthetic";
    case PipelineKind::CovidHier: return "covid_hier";
    case PipelineKind::UkSmartmeter: return "uk_smartmeter";
    }
    return "";
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

PipelineConfig parse_config(const std::string& json_text, const std::string& base_dir, std::optional<std::uint64_t> seed,
                            std::optional<std::string> out_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    PipelineConfig c;
    try {
        only_keys(j, "top level", {"pipeline", "seed", "data", "windows", "models", "experts", "aggregation", "output"});
        if (!j.contains("pipeline")) throw ConfigError("config: 'pipeline' is required (synthetic, covid_hier or uk_smartmeter)");
        const auto kind = j.at("pipeline").get<std::string>();
        if (kind == "synthetic") {
            c.kind = PipelineKind::Synthetic;
        } else if (kind == "covid_hier") {
            c.kind = PipelineKind::CovidHier;
        } else if (kind == "uk_smartmeter") {
            c.kind = PipelineKind::UkSmartmeter;
        } else {
            throw ConfigError("config: unknown pipeline '" + kind + "' (synthetic, covid_hier or uk_smartmeter)");
        }
        read(j, "seed", c.seed);
        if (seed) {
            c.seed = *seed;
            j["seed"] = *seed;
        }

        const json data = j.value("data", json::object());
        only_keys(data, "data", {"target", "synthetic", "zones", "global", "national", "smart_meter", "holidays",
                                 "utc_offset_minutes", "daylight_saving", "categorical"});
        read(data, "target", c.data.target);
        if (data.contains("synthetic")) c.data.synthetic = parse_synthetic_spec(data.at("synthetic").dump());
        if (data.contains("zones")) {
            for (const auto& [zone, path] : data.at("zones").items()) c.data.zone_files[zone] = resolve(base_dir, path.get<std::string>());
        }
        c.data.global_file = resolve(base_dir, data.value("global", std::string()));
        c.data.national_file = resolve(base_dir, data.value("national", std::string()));
        c.data.smart_meter_file = resolve(base_dir, data.value("smart_meter", std::string()));
        c.data.holidays_file = resolve(base_dir, data.value("holidays", std::string()));
        read(data, "utc_offset_minutes", c.data.utc_offset_minutes);
        read(data, "daylight_saving", c.data.daylight_saving);
        read(data, "categorical", c.data.categorical);

        const json win = j.value("windows", json::object());
        only_keys(win, "windows", {"source_begin", "source_end", "target_begin", "test_end", "periods"});
        c.windows.source_begin = read_time(win, "source_begin");
        c.windows.source_end = read_time(win, "source_end");
        c.windows.target_begin = read_time(win, "target_begin", c.windows.source_end);
        c.windows.test_end = read_time(win, "test_end");
        if (win.contains("periods")) {
            for (const auto& p : win.at("periods")) {
                only_keys(p, "windows.periods", {"label", "begin", "end"});
                c.windows.periods.push_back({p.at("label").get<std::string>(), read_time(p, "begin"), read_time(p, "end")});
            }
        }

        const json models = j.value("models", json::object());
        only_keys(models, "models", {"formula", "partition", "per_instant", "lags", "national_formula", "local_formula",
                                     "covariates", "common", "detrend_all", "residuals", "lambda"});
        read(models, "formula", c.models.formula);
        read(models, "partition", c.models.partition);
        read(models, "per_instant", c.models.per_instant);
        read(models, "lags", c.models.lags);
        read(models, "national_formula", c.models.national_formula);
        read(models, "local_formula", c.models.local_formula);
        read(models, "covariates", c.models.covariates);
        read(models, "common", c.models.common);
        read(models, "detrend_all", c.models.detrend_all);
        if (models.contains("residuals")) c.models.residuals = read_residuals(models.at("residuals"));
        if (models.contains("lambda")) {
            const auto& l = models.at("lambda");
            if (l.is_string() && l.get<std::string>() == "gcv") {
                c.models.policy = gam::LambdaPolicy::gcv();
            } else if (l.is_number()) {
                c.models.policy = gam::LambdaPolicy::fixed_value(l.get<double>());
            } else {
                throw ConfigError("config: models.lambda must be \"gcv\" or a number");
            }
        }

        const json ex = j.value("experts", json::object());
        only_keys(ex, "experts", {"quantiles", "forest_covariates", "transfer_effects", "min_forest_rows", "forest"});
        read(ex, "quantiles", c.experts.quantiles);
        read(ex, "forest_covariates", c.experts.forest_covariates);
        read(ex, "transfer_effects", c.experts.transfer_effects);
        read(ex, "min_forest_rows", c.experts.min_forest_rows);
        if (ex.contains("forest")) c.experts.forest = read_forest(ex.at("forest"));
        c.experts.forest.seed = c.seed;

        const json agg = j.value("aggregation", json::object());
        only_keys(agg, "aggregation", {"strategies", "loss", "inner_loss"});
        if (agg.contains("strategies")) {
            c.aggregation.strategies.clear();
            for (const auto& s : agg.at("strategies")) c.aggregation.strategies.push_back(aggregation::parse_strategy(s.get<std::string>()));
        }
        c.aggregation.loss = read_loss(agg, "loss", c.aggregation.loss);
        c.aggregation.inner_loss = read_loss(agg, "inner_loss", c.aggregation.inner_loss);

        const json out = j.value("output", json::object());
        only_keys(out, "output", {"dir", "importance", "ale", "ale_bins"});
        c.output.dir = resolve(base_dir, out.value("dir", std::string("out")));
        if (out_dir) {
            c.output.dir = *out_dir;
            j["output"]["dir"] = *out_dir;
        }
        read(out, "importance", c.output.importance);
        read(out, "ale", c.output.ale);
        read(out, "ale_bins", c.output.ale_bins);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.canonical = j.dump(2);
    validate(c);
    return c;
}

PipelineConfig load_config(const std::string& path, std::optional<std::uint64_t> seed, std::optional<std::string> out_dir) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const auto base = fs::path(path).parent_path().string();
    return parse_config(ss.str(), base.empty() ? "." : base, seed, out_dir);
}

void validate(const PipelineConfig& c) {
    const auto& w = c.windows;
    auto iso = [](Timestamp t) { return format_iso8601(t); };
    if (!(w.source_begin < w.source_end)) {
        throw ConfigError("config: windows.source_begin (" + iso(w.source_begin) + ") must precede windows.source_end (" +
                          iso(w.source_end) + ")");
    }
    if (w.target_begin < w.source_end) {
        throw ConfigError("config: training and test windows overlap: windows.target_begin (" + iso(w.target_begin) +
                          ") is before windows.source_end (" + iso(w.source_end) + ")");
    }
    if (!(w.test_end > w.target_begin && w.test_end > w.source_end)) {
        throw ConfigError("config: windows.test_end (" + iso(w.test_end) + ") must follow the training window");
    }
    for (const auto& p : w.periods) {
        if (!(p.begin < p.end)) throw ConfigError("config: period '" + p.label + "' is empty");
        if (p.begin < w.source_end || p.end > w.test_end) {
            throw ConfigError("config: period '" + p.label + "' lies outside [source_end, test_end)");
        }
    }
    for (double q : c.experts.quantiles) {
        if (!(q > 0.0 && q < 1.0)) throw ConfigError("config: experts.quantiles must lie in (0, 1)");
    }
    if (c.experts.forest.n_trees == 0) throw ConfigError("config: experts.forest.n_trees must be positive");
    if (!c.data.holidays_file.empty()) check_file(c.data.holidays_file, "data.holidays");

    switch (c.kind) {
    case PipelineKind::Synthetic:
        if (!c.data.synthetic) throw ConfigError("config: the synthetic pipeline needs data.synthetic");
        [[fallthrough]];
    case PipelineKind::CovidHier:
        if (c.models.formula.empty()) throw ConfigError("config: models.formula is required");
        check_formula(c.models.formula, "models.formula");
        if (c.aggregation.strategies.empty()) throw ConfigError("config: aggregation.strategies is empty");
        if (c.kind == PipelineKind::CovidHier) {
            check_file(c.data.global_file, "data.global");
            if (c.data.zone_files.empty()) throw ConfigError("config: data.zones is required for covid_hier");
            for (const auto& [zone, path] : c.data.zone_files) check_file(path, "data.zones." + zone);
        }
        break;
    case PipelineKind::UkSmartmeter:
        check_file(c.data.national_file, "data.national");
        check_file(c.data.smart_meter_file, "data.smart_meter");
        if (c.models.national_formula.empty()) throw ConfigError("config: models.national_formula is required");
        if (c.models.local_formula.empty()) throw ConfigError("config: models.local_formula is required");
        check_formula(c.models.national_formula, "models.national_formula");
        check_formula(c.models.local_formula, "models.local_formula");
        if (c.models.covariates.empty()) throw ConfigError("config: models.covariates is required");
        break;
    }
}

} // namespace hierforecast::harness
