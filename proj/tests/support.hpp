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

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace testing {

// Small deterministic generators; the standard distributions are avoided so
// that values do not depend on the library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

private:
    std::mt19937_64 engine_;
};

inline std::vector<hierforecast::Timestamp> half_hours(std::size_t n, hierforecast::Timestamp start = 1577836800) {
    std::vector<hierforecast::Timestamp> ts(n);
    for (std::size_t i = 0; i < n; ++i) ts[i] = start + static_cast<hierforecast::Timestamp>(i) * hierforecast::kHalfHour;
    return ts;
}

inline hierforecast::SeriesFrame frame_of(std::vector<double> y, const std::string& zone = "z") {
    const auto n = y.size();
    return hierforecast::SeriesFrame(zone, half_hours(n), hierforecast::kHalfHour, "y", std::move(y));
}

inline double rms(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / static_cast<double>(a.size()));
}

} // namespace testing
