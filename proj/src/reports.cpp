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

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace hierforecast::harness {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    return out;
}

// Keeps file names portable when method or variable names carry spaces.
std::string slug(const std::string& name) {
    std::string s;
    for (char c : name) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '_';
    return s;
}

void write_long_forecasts(const RunArtifacts& a, const fs::path& path, bool with_observed) {
    auto out = open_out(path);
    out << (with_observed ? "timestamp,series,value\n" : "timestamp,method,forecast\n");
    for (std::size_t i = 0; i < a.timestamps.size(); ++i) {
        const auto ts = format_iso8601(a.timestamps[i]);
        if (with_observed) out << ts << ",observed," << num(a.actual[i]) << '\n';
        for (const auto& [method, values] : a.forecasts) out << ts << ',' << method << ',' << num(values[i]) << '\n';
    }
}

void write_zone_forecasts(const RunArtifacts& a, const fs::path& path) {
    auto out = open_out(path);
    out << "timestamp,strategy,zone,forecast\n";
    for (const auto& s : a.strategies) {
        for (const auto& [zone, values] : s.zone_forecasts) {
            for (std::size_t i = 0; i < values.size(); ++i) {
                out << format_iso8601(s.timestamps[i]) << ',' << s.strategy << ',' << zone << ',' << num(values[i]) << '\n';
            }
        }
    }
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

} // namespace

std::vector<std::string> emit_reports(const RunArtifacts& a, const std::string& out_dir) {
    const fs::path dir(out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create '" + out_dir + "': " + ec.message());
    std::vector<std::string> files;

    const auto table = evaluation::period_table(a.reports);
    evaluation::write_period_csv(table, (dir / "metrics.csv").string());
    files.push_back("metrics.csv");
    {
        auto out = open_out(dir / "metrics.txt");
        out << evaluation::format_period_table(table);
        if (!a.learners.empty()) out << '\n' << evaluation::format_learner_table(a.learners);
    }
    files.push_back("metrics.txt");
    if (!a.learners.empty()) {
        evaluation::write_learner_csv(a.learners, (dir / "learners.csv").string());
        files.push_back("learners.csv");
    }

    write_long_forecasts(a, dir / "forecasts.csv", false);
    files.push_back("forecasts.csv");
    write_long_forecasts(a, dir / "plot_series.csv", true);
    files.push_back("plot_series.csv");

    if (a.panel) {
        transfer::write_panel_csv(*a.panel, (dir / "panel.csv").string());
        files.push_back("panel.csv");
        aggregation::write_weights_csv(a.strategies, (dir / "weights.csv").string());
        files.push_back("weights.csv");
        write_zone_forecasts(a, dir / "plot_zones.csv");
        files.push_back("plot_zones.csv");
    }
    for (const auto& imp : a.importances) {
        const auto name = "importance_" + slug(imp.name) + ".csv";
        forest::write_importance_csv(imp.report, (dir / name).string());
        files.push_back(name);
    }
    for (const auto& curve : a.ales) {
        const auto name = "ale_" + slug(curve.name) + ".csv";
        evaluation::write_ale_csv(curve.curve, (dir / name).string());
        files.push_back(name);
    }

    ordered_json manifest;
    manifest["pipeline"] = a.pipeline;
    manifest["seed"] = a.seed;
    manifest["config_hash"] = fnv1a_hex(a.config);
    manifest["version"] = kVersion;
    manifest["modules"] = {{"series-core", kVersion}, {"additive-model", kVersion}, {"forest", kVersion},
                           {"transfer-stack", kVersion}, {"aggregation", kVersion}, {"evaluation", kVersion},
                           {"harness", kVersion}};
    manifest["stages"] = a.stages;
    manifest["files"] = files;
    if (!a.config.empty()) {
        try {
            manifest["config"] = ordered_json::parse(a.config);
        } catch (const ordered_json::exception&) {
            manifest["config"] = a.config;
        }
    }
    {
        auto out = open_out(dir / "manifest.json");
        out << manifest.dump(2) << '\n';
    }
    files.push_back("manifest.json");
    return files;
}

std::string render_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    std::ifstream in(dir / "metrics.csv");
    if (!in) throw DataError("report: no metrics.csv in '" + run_dir + "'");
    std::string line;
    if (!std::getline(in, line) || line != "method,period,mape,rmse,n") {
        throw DataError("report: '" + (dir / "metrics.csv").string() + "' has an unexpected header");
    }
    evaluation::PeriodTable table;
    std::map<std::string, std::size_t> method_index;
    std::map<std::string, std::size_t> period_index;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split(line);
        if (c.size() != 5) throw DataError("report: malformed metrics row '" + line + "'");
        if (!method_index.count(c[0])) {
            method_index[c[0]] = table.methods.size();
            table.methods.push_back(c[0]);
            table.cells.emplace_back();
        }
        if (!period_index.count(c[1])) {
            period_index[c[1]] = table.periods.size();
            table.periods.push_back(c[1]);
        }
        evaluation::MetricReport r;
        r.label = c[1];
        try {
            r.mape = std::stod(c[2]);
            r.rmse = std::stod(c[3]);
            r.n = std::stoul(c[4]);
        } catch (const std::exception&) {
            throw DataError("report: malformed metrics row '" + line + "'");
        }
        auto& row = table.cells[method_index[c[0]]];
        if (row.size() != period_index[c[1]]) throw DataError("report: metrics rows are not grouped by method");
        row.push_back(r);
    }
    for (const auto& row : table.cells) {
        if (row.size() != table.periods.size()) throw DataError("report: methods have different period splits");
    }
    std::string text = evaluation::format_period_table(table);

    std::ifstream lin(dir / "learners.csv");
    if (lin) {
        std::vector<std::vector<std::string>> rows;
        while (std::getline(lin, line)) {
            if (!line.empty()) rows.push_back(split(line));
        }
        if (rows.size() == 4) {
            std::vector<evaluation::LearnerScore> scores(rows[0].size() - 1);
            for (std::size_t i = 0; i < scores.size(); ++i) {
                scores[i].model = rows[0][i + 1];
                scores[i].rmse = std::stod(rows[1][i + 1]);
                scores[i].mape = std::stod(rows[2][i + 1]);
                scores[i].n_covariates = std::stoul(rows[3][i + 1]);
            }
            text += '\n' + evaluation::format_learner_table(scores);
        }
    }
    return text;
}

} // namespace hierforecast::harness
