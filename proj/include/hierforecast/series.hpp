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

#include "hierforecast/spline.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace hierforecast {

/// Seconds since the Unix epoch (UTC).
using Timestamp = std::int64_t;

inline constexpr std::int64_t kHalfHour = 1800;
inline constexpr std::int64_t kDay = 86400;

/// One covariate column. Categorical columns store level indices as doubles
/// and carry their explicit level set.
struct Column {
    std::vector<double> values;
    std::vector<std::string> levels;

    bool categorical() const noexcept { return !levels.empty(); }
    std::size_t size() const noexcept { return values.size(); }

    static Column numeric(std::vector<double> values);
    /// Builds a categorical column from string labels; levels are sorted.
    static Column from_labels(const std::vector<std::string>& labels);
    static Column categorical_codes(std::vector<double> codes, std::vector<std::string> levels);

    const std::string& label(std::size_t row) const;
    /// Index of `level` in the level set, or -1.
    int level_index(const std::string& level) const;
};

/// Timestamp-indexed table of one target series plus covariates for a
/// single zone (or the global level).
///
/// Rows can be flagged unusable (e.g. the first rows of a lagged column);
/// such rows are kept in place and excluded by metrics and fits.
class SeriesFrame {
public:
    SeriesFrame() = default;
    SeriesFrame(std::string zone_id, std::vector<Timestamp> timestamps, std::int64_t step_seconds,
                std::string target_name, std::vector<double> target);

    std::size_t size() const noexcept { return timestamps_.size(); }
    bool empty() const noexcept { return timestamps_.empty(); }

    const std::string& zone_id() const noexcept { return zone_id_; }
    void set_zone_id(std::string zone) { zone_id_ = std::move(zone); }
    const std::vector<Timestamp>& timestamps() const noexcept { return timestamps_; }
    std::int64_t step() const noexcept { return step_; }
    const std::string& timezone() const noexcept { return timezone_; }
    void set_timezone(std::string label) { timezone_ = std::move(label); }

    const std::string& target_name() const noexcept { return target_name_; }
    const std::vector<double>& target() const noexcept { return target_; }
    void set_target(std::vector<double> target);
    void set_target(std::string name, std::vector<double> target);

    bool has(const std::string& name) const;
    /// Column by name; throws DataError("missing column ...") when absent.
    const Column& column(const std::string& name) const;
    void set_column(const std::string& name, Column column);
    void drop_column(const std::string& name);
    const std::map<std::string, Column>& columns() const noexcept { return columns_; }
    std::vector<std::string> column_names() const;

    /// Numeric view of the target (by its name) or of any column.
    std::span<const double> values(const std::string& name) const;

    const std::vector<bool>& usable() const noexcept { return usable_; }
    bool usable(std::size_t row) const { return usable_[row]; }
    void mark_unusable(std::size_t row) { usable_[row] = false; }
    std::size_t usable_count() const;

    /// Rows [begin, end).
    SeriesFrame slice(std::size_t begin, std::size_t end) const;
    /// Arbitrary increasing row subset. The result keeps the nominal step
    /// even if the subset has gaps.
    SeriesFrame select(std::span<const std::size_t> rows) const;
    /// Rows with begin <= timestamp < end.
    SeriesFrame window(Timestamp begin, Timestamp end) const;
    std::size_t lower_row(Timestamp t) const;

    /// Checks every structural invariant; throws DataError on violation.
    void validate(bool require_constant_step = true) const;

private:
    std::string zone_id_;
    std::vector<Timestamp> timestamps_;
    std::int64_t step_ = kHalfHour;
    std::string timezone_ = "UTC";
    std::string target_name_ = "y";
    std::vector<double> target_;
    std::map<std::string, Column> columns_;
    std::vector<bool> usable_;
};

// ---------------------------------------------------------------------------
// Calendar

struct CivilTime {
    int year;
    int month;  // 1..12
    int day;    // 1..31
    int seconds_of_day;
    int weekday; // 1 = Monday .. 7 = Sunday
};

std::int64_t days_from_civil(int year, int month, int day);
CivilTime civil_from_timestamp(Timestamp t);
Timestamp make_timestamp(int year, int month, int day, int hour = 0, int minute = 0, int second = 0);

/// Parses "YYYY-MM-DD", "YYYY-MM-DDTHH:MM[:SS][Z]" or the same with a space.
Timestamp parse_iso8601(const std::string& text);
std::string format_iso8601(Timestamp t);

struct CalendarSpec {
    /// Holiday dates as days since epoch (local calendar).
    std::set<std::int64_t> holidays;
    /// Fixed offset applied to UTC timestamps to get local civil time.
    int utc_offset_minutes = 0;
    /// European daylight-saving rule (last Sunday of March to last Sunday
    /// of October, switching at 01:00 UTC).
    bool daylight_saving = true;
};

/// Adds DayType (categorical "1".."7", Monday = 1), Instant (half-hour of
/// day, 0..47), ToY (fraction of year in [0, 1)), Holiday, LongWeekEnd and
/// DLS (0/1 numeric) columns.
///
/// LongWeekEnd flags a holiday that touches a weekend together with the
/// weekend and any single bridging weekday (Tuesday holiday bridges Monday,
/// Thursday holiday bridges Friday).
void add_calendar(SeriesFrame& frame, const CalendarSpec& spec);

bool is_summer_time(Timestamp t);

/// Reads a holiday CSV: header row, first column ISO dates.
std::set<std::int64_t> read_holidays(const std::string& path);

// ---------------------------------------------------------------------------
// Transforms

/// Adds `<target>.<lag>` columns. The first max(lag) rows are NaN and
/// flagged unusable.
SeriesFrame add_lags(const SeriesFrame& frame, const std::vector<std::size_t>& lags);

/// out[0] = in[0]; out[t] = alpha*out[t-1] + (1-alpha)*in[t].
std::vector<double> exp_smooth(std::span<const double> series, double alpha);

enum class StationWeighting { ExpDistance, Population };

struct Station {
    std::vector<double> series;
    /// Distance to the zone barycenter (ExpDistance) or population.
    double parameter = 0.0;
};

std::vector<double> station_weights(std::span<const Station> stations, StationWeighting mode);
std::vector<double> station_weighted_average(std::span<const Station> stations, StationWeighting mode);

/// Per-calendar-day minimum (or maximum) of a column, broadcast to every
/// row of the day.
std::vector<double> daily_extreme(const SeriesFrame& frame, const std::string& column, bool maximum,
                                  int utc_offset_minutes = 0);

// ---------------------------------------------------------------------------
// Detrending

/// Y_t = mu + s(t) + eps: s is an unpenalized cubic regression spline in
/// time with three interior knots at the time quartiles.
struct TrendModel {
    spline::BSplineBasis basis;
    std::vector<double> coefficients; // of mu + s(t) on the basis
    double mu = 0.0;
    double time_origin = 0.0;
    double time_scale = 1.0;

    /// mu + s(t).
    std::vector<double> evaluate(std::span<const Timestamp> timestamps) const;
    /// s(t) alone (zero mean over the training rows).
    std::vector<double> trend(std::span<const Timestamp> timestamps) const;
};

TrendModel fit_detrend(const SeriesFrame& frame);
/// Replaces the target by Y^c = Y - s(t) - mu and stores mu + s(t) in the
/// "trend" column.
SeriesFrame apply_detrend(const SeriesFrame& frame, const TrendModel& model);

// ---------------------------------------------------------------------------
// Normalization

/// Per-(zone, instant) empirical means of the target on a source window.
/// Instant -1 is used when normalization is not instant-resolved.
class NormalizationTable {
public:
    NormalizationTable() = default;
    explicit NormalizationTable(bool per_instant) : per_instant_(per_instant) {}

    bool per_instant() const noexcept { return per_instant_; }
    void set(const std::string& zone, int instant, double mean);
    double mean(const std::string& zone, Timestamp t) const;
    double mean_at(const std::string& zone, int instant) const;
    bool has_zone(const std::string& zone) const;
    const std::map<std::pair<std::string, int>, double>& entries() const noexcept { return means_; }

private:
    bool per_instant_ = false;
    std::map<std::pair<std::string, int>, double> means_;
};

int instant_of(Timestamp t, int utc_offset_minutes = 0);

NormalizationTable fit_normalizer(std::span<const SeriesFrame> frames, Timestamp source_begin,
                                  Timestamp source_end, bool per_instant);
SeriesFrame normalize(const SeriesFrame& frame, const NormalizationTable& table);
SeriesFrame denormalize(const SeriesFrame& frame, const NormalizationTable& table);
/// Multiplies values by the zone mean matching each timestamp.
std::vector<double> denormalize_values(std::span<const double> values, std::span<const Timestamp> timestamps,
                                       const std::string& zone, const NormalizationTable& table);

// ---------------------------------------------------------------------------
// CSV

struct CsvSchema {
    std::string target;                 // column holding the target
    std::set<std::string> categorical;  // columns read as categorical
    std::string zone_id;
    bool require_constant_step = true;
};

/// First column: ISO-8601 timestamp. Header mandatory, '.' decimal point.
/// Missing or unparsable values are a hard error.
SeriesFrame read_csv(const std::string& path, const CsvSchema& schema);
void write_csv(const SeriesFrame& frame, const std::string& path);

} // namespace hierforecast
