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

#include "hierforecast/series.hpp"

#include "hierforecast/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace hierforecast {

// ---------------------------------------------------------------------------
// Column

Column Column::numeric(std::vector<double> values) {
    Column c;
    c.values = std::move(values);
    return c;
}

Column Column::from_labels(const std::vector<std::string>& labels) {
    std::vector<std::string> levels(labels.begin(), labels.end());
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    Column c;
    c.levels = levels;
    c.values.reserve(labels.size());
    for (const auto& l : labels) {
        const auto it = std::lower_bound(levels.begin(), levels.end(), l);
        c.values.push_back(static_cast<double>(it - levels.begin()));
    }
    if (c.levels.empty()) c.levels.push_back("");
    return c;
}

Column Column::categorical_codes(std::vector<double> codes, std::vector<std::string> levels) {
    if (levels.empty()) throw DataError("categorical column needs a non-empty level set");
    for (double v : codes) {
        if (!(v >= 0.0 && v < static_cast<double>(levels.size())) || v != std::floor(v)) {
            throw DataError("categorical code out of range");
        }
    }
    Column c;
    c.values = std::move(codes);
    c.levels = std::move(levels);
    return c;
}

const std::string& Column::label(std::size_t row) const {
    return levels.at(static_cast<std::size_t>(values.at(row)));
}

int Column::level_index(const std::string& level) const {
    const auto it = std::find(levels.begin(), levels.end(), level);
    return it == levels.end() ? -1 : static_cast<int>(it - levels.begin());
}

// ---------------------------------------------------------------------------
// SeriesFrame

SeriesFrame::SeriesFrame(std::string zone_id, std::vector<Timestamp> timestamps, std::int64_t step_seconds,
                         std::string target_name, std::vector<double> target)
    : zone_id_(std::move(zone_id)),
      timestamps_(std::move(timestamps)),
      step_(step_seconds),
      target_name_(std::move(target_name)),
      target_(std::move(target)),
      usable_(timestamps_.size(), true) {
    if (target_.size() != timestamps_.size()) {
        throw DataError("frame '" + zone_id_ + "': target length " + std::to_string(target_.size()) +
                        " differs from " + std::to_string(timestamps_.size()) + " timestamps");
    }
    for (std::size_t i = 1; i < timestamps_.size(); ++i) {
        if (timestamps_[i] <= timestamps_[i - 1]) {
            throw DataError("frame '" + zone_id_ + "': timestamps not strictly increasing at row " +
                            std::to_string(i));
        }
    }
}

void SeriesFrame::set_target(std::vector<double> target) {
    if (target.size() != size()) throw DataError("set_target: length mismatch");
    target_ = std::move(target);
}

void SeriesFrame::set_target(std::string name, std::vector<double> target) {
    set_target(std::move(target));
    target_name_ = std::move(name);
}

bool SeriesFrame::has(const std::string& name) const { return columns_.count(name) > 0; }

const Column& SeriesFrame::column(const std::string& name) const {
    const auto it = columns_.find(name);
    if (it == columns_.end()) {
        throw DataError("frame '" + zone_id_ + "': missing column '" + name + "'");
    }
    return it->second;
}

void SeriesFrame::set_column(const std::string& name, Column column) {
    if (column.size() != size()) {
        throw DataError("frame '" + zone_id_ + "': column '" + name + "' has length " +
                        std::to_string(column.size()) + ", expected " + std::to_string(size()));
    }
    columns_[name] = std::move(column);
}

void SeriesFrame::drop_column(const std::string& name) { columns_.erase(name); }

std::vector<std::string> SeriesFrame::column_names() const {
    std::vector<std::string> names;
    names.reserve(columns_.size());
    for (const auto& [name, _] : columns_) names.push_back(name);
    return names;
}

std::span<const double> SeriesFrame::values(const std::string& name) const {
    if (name == target_name_ && !has(name)) return target_;
    return column(name).values;
}

std::size_t SeriesFrame::usable_count() const {
    return static_cast<std::size_t>(std::count(usable_.begin(), usable_.end(), true));
}

SeriesFrame SeriesFrame::slice(std::size_t begin, std::size_t end) const {
    end = std::min(end, size());
    begin = std::min(begin, end);
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    return select(rows);
}

SeriesFrame SeriesFrame::select(std::span<const std::size_t> rows) const {
    SeriesFrame out;
    out.zone_id_ = zone_id_;
    out.step_ = step_;
    out.timezone_ = timezone_;
    out.target_name_ = target_name_;
    out.timestamps_.reserve(rows.size());
    out.target_.reserve(rows.size());
    out.usable_.reserve(rows.size());
    for (std::size_t r : rows) {
        if (!out.timestamps_.empty() && timestamps_.at(r) <= out.timestamps_.back()) {
            throw DataError("select: rows must be strictly increasing");
        }
        out.timestamps_.push_back(timestamps_.at(r));
        out.target_.push_back(target_[r]);
        out.usable_.push_back(usable_[r]);
    }
    for (const auto& [name, col] : columns_) {
        Column c;
        c.levels = col.levels;
        c.values.reserve(rows.size());
        for (std::size_t r : rows) c.values.push_back(col.values[r]);
        out.columns_.emplace(name, std::move(c));
    }
    return out;
}

std::size_t SeriesFrame::lower_row(Timestamp t) const {
    return static_cast<std::size_t>(std::lower_bound(timestamps_.begin(), timestamps_.end(), t) -
                                    timestamps_.begin());
}

SeriesFrame SeriesFrame::window(Timestamp begin, Timestamp end) const {
    return slice(lower_row(begin), lower_row(end));
}

void SeriesFrame::validate(bool require_constant_step) const {
    if (target_.size() != timestamps_.size() || usable_.size() != timestamps_.size()) {
        throw DataError("frame '" + zone_id_ + "': target/usable length mismatch");
    }
    for (std::size_t i = 1; i < timestamps_.size(); ++i) {
        const auto gap = timestamps_[i] - timestamps_[i - 1];
        if (gap <= 0) throw DataError("frame '" + zone_id_ + "': timestamps not strictly increasing");
        if (require_constant_step && gap != step_) {
            throw DataError("frame '" + zone_id_ + "': irregular step at " + format_iso8601(timestamps_[i]));
        }
    }
    for (const auto& [name, col] : columns_) {
        if (col.size() != size()) throw DataError("frame '" + zone_id_ + "': column '" + name + "' length mismatch");
        if (col.categorical()) {
            for (double v : col.values) {
                if (!(v >= 0.0 && v < static_cast<double>(col.levels.size()))) {
                    throw DataError("frame '" + zone_id_ + "': column '" + name + "' has an undeclared level");
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Calendar

std::int64_t days_from_civil(int year, int month, int day) {
    const std::int64_t y = static_cast<std::int64_t>(year) - (month <= 2 ? 1 : 0);
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const std::int64_t yoe = y - era * 400;
    const std::int64_t doy = (153 * (month + (month > 2 ? -3 : 9)) + 2) / 5 + day - 1;
    const std::int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + doe - 719468;
}

namespace {

void civil_from_days(std::int64_t z, int& year, int& month, int& day) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const std::int64_t doe = z - era * 146097;
    const std::int64_t yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const std::int64_t mp = (5 * doy + 2) / 153;
    day = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
    month = static_cast<int>(mp < 10 ? mp + 3 : mp - 9);
    year = static_cast<int>(yoe + era * 400 + (month <= 2 ? 1 : 0));
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

int weekday_of_day(std::int64_t days) {
    // 1970-01-01 was a Thursday
    std::int64_t w = (days + 3) % 7;
    if (w < 0) w += 7;
    return static_cast<int>(w) + 1;
}

std::int64_t last_sunday(int year, int month, int last_day) {
    const std::int64_t d = days_from_civil(year, month, last_day);
    return d - (weekday_of_day(d) % 7);
}

} // namespace

CivilTime civil_from_timestamp(Timestamp t) {
    const std::int64_t days = floor_div(t, kDay);
    CivilTime c{};
    civil_from_days(days, c.year, c.month, c.day);
    c.seconds_of_day = static_cast<int>(t - days * kDay);
    c.weekday = weekday_of_day(days);
    return c;
}

Timestamp make_timestamp(int year, int month, int day, int hour, int minute, int second) {
    return days_from_civil(year, month, day) * kDay + hour * 3600 + minute * 60 + second;
}

Timestamp parse_iso8601(const std::string& text) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    char sep = 0;
    const int n = std::sscanf(text.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &s);
    if (n < 3 || (n > 3 && n < 6) || (n >= 4 && sep != 'T' && sep != ' ')) {
        throw DataError("unparsable timestamp '" + text + "'");
    }
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 60) {
        throw DataError("timestamp out of range '" + text + "'");
    }
    return make_timestamp(y, mo, d, h, mi, s);
}

std::string format_iso8601(Timestamp t) {
    const CivilTime c = civil_from_timestamp(t);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02dZ", c.year, c.month, c.day,
                  c.seconds_of_day / 3600, (c.seconds_of_day / 60) % 60, c.seconds_of_day % 60);
    return buf;
}

bool is_summer_time(Timestamp t) {
    const CivilTime c = civil_from_timestamp(t);
    const Timestamp start = last_sunday(c.year, 3, 31) * kDay + 3600;
    const Timestamp end = last_sunday(c.year, 10, 31) * kDay + 3600;
    return t >= start && t < end;
}

int instant_of(Timestamp t, int utc_offset_minutes) {
    const Timestamp local = t + static_cast<Timestamp>(utc_offset_minutes) * 60;
    const std::int64_t seconds = local - floor_div(local, kDay) * kDay;
    return static_cast<int>(seconds / kHalfHour);
}

void add_calendar(SeriesFrame& frame, const CalendarSpec& spec) {
    const std::size_t n = frame.size();
    std::vector<double> daytype(n), instant(n), toy(n), holiday(n), long_weekend(n), dls(n);

    std::set<std::int64_t> bridged;
    for (std::int64_t h : spec.holidays) {
        switch (weekday_of_day(h)) {
        case 1: for (std::int64_t d = h - 2; d <= h; ++d) bridged.insert(d); break;
        case 2: for (std::int64_t d = h - 3; d <= h; ++d) bridged.insert(d); break;
        case 4: for (std::int64_t d = h; d <= h + 3; ++d) bridged.insert(d); break;
        case 5: for (std::int64_t d = h; d <= h + 2; ++d) bridged.insert(d); break;
        default: break;
        }
    }

    const auto offset = static_cast<Timestamp>(spec.utc_offset_minutes) * 60;
    for (std::size_t i = 0; i < n; ++i) {
        const Timestamp t = frame.timestamps()[i];
        const Timestamp local = t + offset;
        const std::int64_t day = floor_div(local, kDay);
        const CivilTime c = civil_from_timestamp(local);
        daytype[i] = static_cast<double>(c.weekday - 1);
        instant[i] = static_cast<double>(c.seconds_of_day / kHalfHour);
        const Timestamp year_start = make_timestamp(c.year, 1, 1);
        const Timestamp next_year = make_timestamp(c.year + 1, 1, 1);
        toy[i] = static_cast<double>(local - year_start) / static_cast<double>(next_year - year_start);
        holiday[i] = spec.holidays.count(day) ? 1.0 : 0.0;
        long_weekend[i] = bridged.count(day) ? 1.0 : 0.0;
        dls[i] = spec.daylight_saving && is_summer_time(t) ? 1.0 : 0.0;
    }
    frame.set_column("DayType", Column::categorical_codes(std::move(daytype), {"1", "2", "3", "4", "5", "6", "7"}));
    frame.set_column("Instant", Column::numeric(std::move(instant)));
    frame.set_column("ToY", Column::numeric(std::move(toy)));
    frame.set_column("Holiday", Column::numeric(std::move(holiday)));
    frame.set_column("LongWeekEnd", Column::numeric(std::move(long_weekend)));
    frame.set_column("DLS", Column::numeric(std::move(dls)));
}

// ---------------------------------------------------------------------------
// CSV helpers

namespace {

std::string trim(std::string s) {
    const auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) fields.push_back(trim(field));
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

double parse_number(const std::string& text, const std::string& where) {
    double value = 0.0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if (!text.empty() && *first == '+') ++first;
    const auto res = std::from_chars(first, last, value);
    if (text.empty() || res.ec != std::errc() || res.ptr != last || !std::isfinite(value)) {
        throw DataError("missing or non-numeric value '" + text + "' at " + where);
    }
    return value;
}

} // namespace

std::set<std::int64_t> read_holidays(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open holiday file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("holiday file '" + path + "' has no header");
    std::set<std::int64_t> days;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto fields = split_csv_line(line);
        days.insert(floor_div(parse_iso8601(fields.at(0)), kDay));
    }
    return days;
}

SeriesFrame read_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "': missing header row");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    if (header.size() < 2) throw DataError("'" + path + "': need a timestamp column and at least one value column");

    std::vector<Timestamp> ts;
    std::vector<std::vector<std::string>> raw(header.size() - 1);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw DataError("'" + path + "' line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
        }
        ts.push_back(parse_iso8601(fields[0]));
        for (std::size_t c = 1; c < fields.size(); ++c) raw[c - 1].push_back(std::move(fields[c]));
    }

    std::vector<double> target;
    bool found_target = false;
    std::map<std::string, Column> cols;
    for (std::size_t c = 0; c < raw.size(); ++c) {
        const std::string& name = header[c + 1];
        if (schema.categorical.count(name)) {
            for (std::size_t r = 0; r < raw[c].size(); ++r) {
                if (raw[c][r].empty() || raw[c][r] == "NA") {
                    throw DataError("'" + path + "': missing categorical value in column '" + name + "' row " +
                                    std::to_string(r + 2));
                }
            }
            cols.emplace(name, Column::from_labels(raw[c]));
            continue;
        }
        std::vector<double> values;
        values.reserve(raw[c].size());
        for (std::size_t r = 0; r < raw[c].size(); ++r) {
            values.push_back(parse_number(raw[c][r], "'" + path + "' column '" + name + "' row " + std::to_string(r + 2)));
        }
        if (name == schema.target) {
            target = std::move(values);
            found_target = true;
        } else {
            cols.emplace(name, Column::numeric(std::move(values)));
        }
    }
    if (!found_target) throw DataError("'" + path + "': target column '" + schema.target + "' not found");
    const std::int64_t step = ts.size() >= 2 ? ts[1] - ts[0] : kHalfHour;
    SeriesFrame frame(schema.zone_id, std::move(ts), step, schema.target, std::move(target));
    for (auto& [name, col] : cols) frame.set_column(name, std::move(col));
    frame.validate(schema.require_constant_step);
    return frame;
}

void write_csv(const SeriesFrame& frame, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "timestamp," << frame.target_name();
    for (const auto& [name, _] : frame.columns()) out << ',' << name;
    out << '\n';
    char buf[64];
    for (std::size_t i = 0; i < frame.size(); ++i) {
        out << format_iso8601(frame.timestamps()[i]);
        std::snprintf(buf, sizeof buf, ",%.17g", frame.target()[i]);
        out << buf;
        for (const auto& [name, col] : frame.columns()) {
            if (col.categorical()) {
                out << ',' << col.label(i);
            } else {
                std::snprintf(buf, sizeof buf, ",%.17g", col.values[i]);
                out << buf;
            }
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Transforms

SeriesFrame add_lags(const SeriesFrame& frame, const std::vector<std::size_t>& lags) {
    if (lags.empty()) return frame;
    const std::size_t n = frame.size();
    std::size_t max_lag = 0;
    for (std::size_t lag : lags) {
        if (lag == 0) throw DataError("add_lags: lag 0 would duplicate the target");
        if (lag >= n) {
            throw DataError("add_lags: insufficient history for lag " + std::to_string(lag) + " (" +
                            std::to_string(n) + " rows)");
        }
        max_lag = std::max(max_lag, lag);
    }
    SeriesFrame out = frame;
    const auto& y = frame.target();
    for (std::size_t lag : lags) {
        std::vector<double> col(n, std::numeric_limits<double>::quiet_NaN());
        for (std::size_t t = lag; t < n; ++t) col[t] = y[t - lag];
        out.set_column(frame.target_name() + "." + std::to_string(lag), Column::numeric(std::move(col)));
    }
    for (std::size_t t = 0; t < max_lag; ++t) out.mark_unusable(t);
    return out;
}

std::vector<double> exp_smooth(std::span<const double> series, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw ConfigError("exp_smooth: alpha must lie in (0, 1), got " + std::to_string(alpha));
    }
    if (series.empty()) throw DataError("exp_smooth: empty series");
    std::vector<double> out(series.size());
    for (std::size_t t = 0; t < series.size(); ++t) {
        if (!std::isfinite(series[t])) throw DataError("exp_smooth: missing value at index " + std::to_string(t));
        out[t] = t == 0 ? series[0] : alpha * out[t - 1] + (1.0 - alpha) * series[t];
    }
    return out;
}

std::vector<double> station_weights(std::span<const Station> stations, StationWeighting mode) {
    if (stations.empty()) throw DataError("station average: no stations");
    std::vector<double> w(stations.size());
    if (mode == StationWeighting::ExpDistance) {
        // shift by the smallest distance so the largest weight is exp(0)
        double dmin = stations[0].parameter;
        for (const auto& s : stations) {
            if (!(s.parameter >= 0.0)) throw DataError("station average: negative distance");
            dmin = std::min(dmin, s.parameter);
        }
        for (std::size_t i = 0; i < stations.size(); ++i) w[i] = std::exp(-(stations[i].parameter - dmin));
    } else {
        for (std::size_t i = 0; i < stations.size(); ++i) {
            if (!(stations[i].parameter > 0.0)) throw DataError("station average: population must be positive");
            w[i] = stations[i].parameter;
        }
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) x /= total;
    return w;
}

std::vector<double> station_weighted_average(std::span<const Station> stations, StationWeighting mode) {
    const auto w = station_weights(stations, mode);
    const std::size_t n = stations[0].series.size();
    for (const auto& s : stations) {
        if (s.series.size() != n) throw DataError("station average: mismatched series lengths");
    }
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < stations.size(); ++i) {
        for (std::size_t t = 0; t < n; ++t) out[t] += w[i] * stations[i].series[t];
    }
    return out;
}

std::vector<double> daily_extreme(const SeriesFrame& frame, const std::string& column, bool maximum,
                                  int utc_offset_minutes) {
    const auto values = frame.values(column);
    const auto offset = static_cast<Timestamp>(utc_offset_minutes) * 60;
    std::vector<double> out(values.size());
    std::size_t begin = 0;
    while (begin < values.size()) {
        const std::int64_t day = floor_div(frame.timestamps()[begin] + offset, kDay);
        std::size_t end = begin;
        double extreme = values[begin];
        while (end < values.size() && floor_div(frame.timestamps()[end] + offset, kDay) == day) {
            extreme = maximum ? std::max(extreme, values[end]) : std::min(extreme, values[end]);
            ++end;
        }
        std::fill(out.begin() + static_cast<long>(begin), out.begin() + static_cast<long>(end), extreme);
        begin = end;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Detrending

std::vector<double> TrendModel::evaluate(std::span<const Timestamp> timestamps) const {
    std::vector<double> out(timestamps.size());
    std::vector<double> row(basis.size());
    for (std::size_t i = 0; i < timestamps.size(); ++i) {
        const double x = (static_cast<double>(timestamps[i]) - time_origin) / time_scale;
        basis.evaluate(x, row);
        double v = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) v += row[j] * coefficients[j];
        out[i] = v;
    }
    return out;
}

std::vector<double> TrendModel::trend(std::span<const Timestamp> timestamps) const {
    auto out = evaluate(timestamps);
    for (double& v : out) v -= mu;
    return out;
}

TrendModel fit_detrend(const SeriesFrame& frame) {
    const std::size_t n = frame.size();
    if (n < 10) throw DataError("fit_detrend: need at least 10 observations, got " + std::to_string(n));
    TrendModel model;
    model.time_origin = static_cast<double>(frame.timestamps().front());
    model.time_scale = std::max(1.0, static_cast<double>(frame.timestamps().back() - frame.timestamps().front()));
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = (static_cast<double>(frame.timestamps()[i]) - model.time_origin) / model.time_scale;
    }
    auto knots = spline::quantile_knots(x, 3);
    if (knots.size() != 3) throw NumericalError("fit_detrend: time quartiles do not give three distinct knots");
    model.basis = spline::BSplineBasis::open(0.0, 1.0, std::move(knots));

    const auto k = static_cast<Eigen::Index>(model.basis.size());
    Eigen::MatrixXd design(static_cast<Eigen::Index>(n), k);
    std::vector<double> row(model.basis.size());
    for (std::size_t i = 0; i < n; ++i) {
        model.basis.evaluate(x[i], row);
        for (Eigen::Index j = 0; j < k; ++j) design(static_cast<Eigen::Index>(i), j) = row[j];
    }
    const Eigen::Map<const Eigen::VectorXd> y(frame.target().data(), static_cast<Eigen::Index>(n));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < k) {
        const auto r = qr.matrixR().diagonal().cwiseAbs();
        const double cond = r.minCoeff() > 0.0 ? r.maxCoeff() / r.minCoeff() : std::numeric_limits<double>::infinity();
        throw NumericalError("fit_detrend: rank-deficient design (rank " + std::to_string(qr.rank()) + " of " +
                             std::to_string(k) + ", condition estimate " + std::to_string(cond) + ")");
    }
    const Eigen::VectorXd coef = qr.solve(y);
    model.coefficients.assign(coef.data(), coef.data() + k);
    const Eigen::VectorXd fitted = design * coef;
    model.mu = fitted.mean();
    return model;
}

SeriesFrame apply_detrend(const SeriesFrame& frame, const TrendModel& model) {
    SeriesFrame out = frame;
    auto level = model.evaluate(frame.timestamps());
    std::vector<double> yc(frame.size());
    for (std::size_t i = 0; i < frame.size(); ++i) yc[i] = frame.target()[i] - level[i];
    out.set_target(std::move(yc));
    out.set_column("trend", Column::numeric(std::move(level)));
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

void NormalizationTable::set(const std::string& zone, int instant, double mean) {
    if (!(mean > 0.0) || !std::isfinite(mean)) {
        throw DataError("non-normalizable series: zone '" + zone + "' has mean " + std::to_string(mean));
    }
    means_[{zone, per_instant_ ? instant : -1}] = mean;
}

double NormalizationTable::mean_at(const std::string& zone, int instant) const {
    const auto it = means_.find({zone, per_instant_ ? instant : -1});
    if (it == means_.end()) {
        throw DataError("normalization table has no entry for zone '" + zone + "'" +
                        (per_instant_ ? " instant " + std::to_string(instant) : std::string()));
    }
    return it->second;
}

double NormalizationTable::mean(const std::string& zone, Timestamp t) const {
    return mean_at(zone, per_instant_ ? instant_of(t) : -1);
}

bool NormalizationTable::has_zone(const std::string& zone) const {
    for (const auto& [key, _] : means_) {
        if (key.first == zone) return true;
    }
    return false;
}

NormalizationTable fit_normalizer(std::span<const SeriesFrame> frames, Timestamp source_begin, Timestamp source_end,
                                  bool per_instant) {
    NormalizationTable table(per_instant);
    for (const auto& frame : frames) {
        std::map<int, std::pair<double, std::size_t>> acc;
        for (std::size_t i = 0; i < frame.size(); ++i) {
            const Timestamp t = frame.timestamps()[i];
            if (t < source_begin || t >= source_end) continue;
            auto& [sum, count] = acc[per_instant ? instant_of(t) : -1];
            sum += frame.target()[i];
            ++count;
        }
        if (acc.empty()) throw DataError("fit_normalizer: zone '" + frame.zone_id() + "' has no rows in the source window");
        for (const auto& [key, sc] : acc) table.set(frame.zone_id(), key, sc.first / static_cast<double>(sc.second));
    }
    return table;
}

SeriesFrame normalize(const SeriesFrame& frame, const NormalizationTable& table) {
    SeriesFrame out = frame;
    std::vector<double> y(frame.size());
    for (std::size_t i = 0; i < frame.size(); ++i) {
        y[i] = frame.target()[i] / table.mean(frame.zone_id(), frame.timestamps()[i]);
    }
    out.set_target(std::move(y));
    return out;
}

SeriesFrame denormalize(const SeriesFrame& frame, const NormalizationTable& table) {
    SeriesFrame out = frame;
    out.set_target(denormalize_values(frame.target(), frame.timestamps(), frame.zone_id(), table));
    return out;
}

std::vector<double> denormalize_values(std::span<const double> values, std::span<const Timestamp> timestamps,
                                       const std::string& zone, const NormalizationTable& table) {
    if (values.size() != timestamps.size()) throw DataError("denormalize: length mismatch");
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * table.mean(zone, timestamps[i]);
    return out;
}

} // namespace hierforecast
