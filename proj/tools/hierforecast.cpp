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

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace hf = hierforecast;
namespace fs = std::filesystem;

namespace {

int run(const std::string& config_path, const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed) {
    const auto config = hf::harness::load_config(config_path, seed, out);
    hf::harness::RunArtifacts artifacts;
    try {
        hf::harness::run_pipeline(config, artifacts);
    } catch (const hf::Error&) {
        // Keep whatever the completed stages produced.
        try {
            hf::harness::emit_reports(artifacts, config.output.dir);
        } catch (const hf::Error&) {
        }
        throw;
    }
    const auto files = hf::harness::emit_reports(artifacts, config.output.dir);
    std::cout << hf::harness::render_report(config.output.dir);
    std::cout << "wrote " << files.size() << " files to " << config.output.dir << '\n';
    return 0;
}

int synth(const std::string& spec_path, const std::string& out) {
    std::ifstream in(spec_path);
    if (!in) throw hf::ConfigError("synth: cannot read '" + spec_path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const auto data = hf::harness::generate_synthetic(hf::harness::parse_synthetic_spec(ss.str()));
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw hf::DataError("synth: cannot create '" + out + "'");
    for (const auto& [zone, frame] : data.zones) hf::write_csv(frame, (fs::path(out) / (zone + ".csv")).string());
    hf::write_csv(data.global, (fs::path(out) / "global.csv").string());
    std::cout << "wrote " << data.zones.size() + 1 << " series to " << out << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical load forecasting with stacked GAM-RF experts and online aggregation"};
    app.set_version_flag("--version", hf::harness::kVersion);
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> run_out;
    std::optional<std::uint64_t> seed;
    auto* run_cmd = app.add_subcommand("run", "Run a pipeline from a JSON config");
    run_cmd->add_option("config", config_path, "Config file")->required();
    run_cmd->add_option("--out", run_out, "Output directory (overrides output.dir)");
    run_cmd->add_option("--seed", seed, "Seed (overrides the config seed)");

    std::string spec_path;
    std::string synth_out = "synth";
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic hierarchy as CSV files");
    synth_cmd->add_option("spec", spec_path, "Synthetic spec (JSON)")->required();
    synth_cmd->add_option("--out", synth_out, "Output directory");

    std::string run_dir;
    auto* report_cmd = app.add_subcommand("report", "Print the tables of a run directory");
    report_cmd->add_option("run-dir", run_dir, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run_cmd) return run(config_path, run_out, seed);
        if (*synth_cmd) return synth(spec_path, synth_out);
        if (*report_cmd) {
            std::cout << hf::harness::render_report(run_dir);
            return 0;
        }
    } catch (const hf::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(hf::ErrorKind::Numerical);
    }
    return 0;
}
