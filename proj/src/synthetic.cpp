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

#include <cmath>
#include <random>

namespace hierforecast::harness {

namespace {

using nlohmann::json;

// Box-Muller over the raw engine output keeps draws identical across
// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * uniform());
    }

private:
    std::mt19937_64 engine_;
};

double per_zone(const std::vector<double>& v, std::size_t z, double fallback) {
    if (v.empty()) return fallback;
    return v.size() == 1 ? v[0] : v.at(z);
}

Timestamp json_time(const json& j, const std::string& key) {
    if (j.is_number_integer()) return j.get<Timestamp>();
    if (!j.is_string()) throw ConfigError("synthetic spec: '" + key + "' must be an ISO date");
    return parse_iso8601(j.get<std::string>());
}

} // namespace

SyntheticSpec parse_synthetic_spec(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synthetic spec: ") + e.what());
    }
    SyntheticSpec s;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "zones") {
                s.zones = value.get<std::size_t>();
            } else if (key == "days") {
                s.days = value.get<std::size_t>();
            } else if (key == "start") {
                s.start = json_time(value, key);
            } else if (key == "noise") {
                s.noise = value.get<double>();
            } else if (key == "seed") {
                s.seed = value.get<std::uint64_t>();
            } else if (key == "shifts") {
                for (const auto& sh : value) {
                    ShiftSpec shift;
                    for (const auto& [k, v] : sh.items()) {
                        if (k == "at") {
                            shift.at = json_time(v, "at");
                        } else if (k == "level") {
                            shift.level = v.is_array() ? v.get<std::vector<double>>() : std::vector<double>{v.get<double>()};
                        } else if (k == "pattern") {
                            shift.pattern = v.is_array() ? v.get<std::vector<double>>() : std::vector<double>{v.get<double>()};
                        } else {
                            throw ConfigError("synthetic spec: unknown shift key '" + k + "'");
                        }
                    }
                    s.shifts.push_back(std::move(shift));
                }
            } else {
                throw ConfigError("synthetic spec: unknown key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synthetic spec: ") + e.what());
    }
    return s;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.zones == 0) throw ConfigError("synthetic spec: at least one zone is needed");
    if (spec.days < 2) throw ConfigError("synthetic spec: at least two days are needed");
    if (spec.noise < 0.0) throw ConfigError("synthetic spec: noise must be non-negative");
    const std::size_t n = spec.days * 48;
    const Timestamp end = spec.start + static_cast<Timestamp>(n) * kHalfHour;
    for (const auto& sh : spec.shifts) {
        if (sh.at < spec.start || sh.at >= end) throw ConfigError("synthetic spec: shift time outside the series");
        for (const auto* v : {&sh.level, &sh.pattern}) {
            if (v->size() > 1 && v->size() != spec.zones) {
                throw ConfigError("synthetic spec: shift vectors need one value or one per zone");
            }
        }
    }

    std::vector<Timestamp> ts(n);
    for (std::size_t i = 0; i < n; ++i) ts[i] = spec.start + static_cast<Timestamp>(i) * kHalfHour;

    Rng rng(spec.seed);
    const std::size_t k = spec.zones;
    // Temperatures: seasonal + daily cycle + AR(1) daily anomaly, shared
    // by the zones up to a small local part.
    std::vector<double> shared(spec.days);
    for (std::size_t d = 0; d < spec.days; ++d) shared[d] = (d ? 0.8 * shared[d - 1] : 0.0) + 1.5 * rng.normal();
    std::vector<std::vector<double>> temp(k, std::vector<double>(n));
    for (std::size_t z = 0; z < k; ++z) {
        double local = 0.0, anomaly = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (i % 48 == 0) {
                local = 0.8 * local + 0.3 * rng.normal();
                anomaly = shared[i / 48] + local;
            }
            const auto c = civil_from_timestamp(ts[i]);
            const double doy = static_cast<double>(days_from_civil(c.year, c.month, c.day) - days_from_civil(c.year, 1, 1));
            const double h = static_cast<double>(c.seconds_of_day) / 1800.0;
            temp[z][i] = 11.0 - 0.7 * static_cast<double>(z) - 7.0 * std::cos(2 * M_PI * (doy - 15.0) / 365.25) +
                         3.0 * std::sin(2 * M_PI * (h - 18.0) / 48.0) + anomaly;
        }
    }

    SyntheticData out;
    std::vector<double> global(n, 0.0), global_temp(n, 0.0);
    out.global_signal.assign(n, 0.0);
    for (std::size_t z = 0; z < k; ++z) {
        const double zf = static_cast<double>(z);
        const double level = 1000.0 * (1.0 + 0.3 * zf);
        std::vector<double> sig(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = civil_from_timestamp(ts[i]);
            const double h = static_cast<double>(c.seconds_of_day) / 1800.0;
            const double doy = static_cast<double>(days_from_civil(c.year, c.month, c.day) - days_from_civil(c.year, 1, 1));
            double scale = 1.0, amplitude = 1.0;
            for (const auto& sh : spec.shifts) {
                if (ts[i] < sh.at) continue;
                scale *= per_zone(sh.level, z, 1.0);
                amplitude *= 1.0 + per_zone(sh.pattern, z, 0.0);
            }
            const double daily = amplitude * (0.15 * std::sin(2 * M_PI * (h - 14.0 - zf) / 48.0) +
                                              0.06 * (1.0 + 0.2 * zf) * std::sin(4 * M_PI * (h - 8.0) / 48.0));
            const double weekly = c.weekday >= 6 ? -0.08 * (1.0 + 0.1 * zf) : c.weekday == 1 ? -0.01 : 0.0;
            const double heat = (0.012 + 0.002 * zf) * std::max(15.0 - temp[z][i], 0.0);
            const double annual = 0.04 * std::cos(2 * M_PI * doy / 365.25);
            sig[i] = level * scale * (1.0 + daily + weekly + heat + annual);
        }
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = spec.noise > 0.0 ? sig[i] * (1.0 + spec.noise * rng.normal()) : sig[i];
            global[i] += y[i];
            out.global_signal[i] += sig[i];
            global_temp[i] += temp[z][i] / static_cast<double>(k);
        }
        const std::string name = "z" + std::to_string(z + 1);
        SeriesFrame f(name, ts, kHalfHour, "Load", std::move(y));
        f.set_column("Temp", Column::numeric(temp[z]));
        out.zones.emplace(name, std::move(f));
        out.signal.emplace(name, std::move(sig));
    }
    out.global = SeriesFrame(transfer::kGlobalZone, ts, kHalfHour, "Load", std::move(global));
    out.global.set_column("Temp", Column::numeric(std::move(global_temp)));
    return out;
}

} // namespace hierforecast::harness
