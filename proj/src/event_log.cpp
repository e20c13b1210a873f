#include "ppm/event_log.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>
#include <unordered_map>

#include "ppm/csv.hpp"

namespace ppm {

namespace {

// Days between 1970-01-01 and y-m-d in the proleptic Gregorian calendar.
long long days_from_civil(long long y, unsigned m, unsigned d) {
    y -= m <= 2;
    const long long era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long long>(doe) - 719468;
}

void civil_from_days(long long z, long long& y, unsigned& m, unsigned& d) {
    z += 719468;
    const long long era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const long long yr = static_cast<long long>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = yr + (m <= 2);
}

unsigned days_in_month(long long y, unsigned m) {
    static const unsigned lengths[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (m == 2) {
        const bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
        return leap ? 29 : 28;
    }
    return lengths[m - 1];
}

bool read_digits(const std::string& s, size_t& pos, int count, int& out) {
    if (pos + count > s.size()) return false;
    int value = 0;
    for (int i = 0; i < count; ++i) {
        const char c = s[pos + i];
        if (c < '0' || c > '9') return false;
        value = value * 10 + (c - '0');
    }
    pos += count;
    out = value;
    return true;
}

}  // namespace

double parse_timestamp(const std::string& text) {
    size_t begin = 0, fin = text.size();
    while (begin < fin && std::isspace(static_cast<unsigned char>(text[begin]))) ++begin;
    while (fin > begin && std::isspace(static_cast<unsigned char>(text[fin - 1]))) --fin;
    const std::string s = text.substr(begin, fin - begin);

    size_t pos = 0;
    int year, month, day, hour, minute, second;
    const auto fail = [&]() -> double { throw ValueError("bad timestamp '" + text + "'"); };
    if (!read_digits(s, pos, 4, year)) return fail();
    if (pos >= s.size() || s[pos] != '-') return fail();
    ++pos;
    if (!read_digits(s, pos, 2, month)) return fail();
    if (pos >= s.size() || s[pos] != '-') return fail();
    ++pos;
    if (!read_digits(s, pos, 2, day)) return fail();
    if (pos >= s.size() || (s[pos] != 'T' && s[pos] != ' ')) return fail();
    ++pos;
    if (!read_digits(s, pos, 2, hour)) return fail();
    if (pos >= s.size() || s[pos] != ':') return fail();
    ++pos;
    if (!read_digits(s, pos, 2, minute)) return fail();
    if (pos >= s.size() || s[pos] != ':') return fail();
    ++pos;
    if (!read_digits(s, pos, 2, second)) return fail();

    double fraction = 0.0;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        double place = 0.1;
        bool any = false;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
            fraction += (s[pos] - '0') * place;
            place *= 0.1;
            ++pos;
            any = true;
        }
        if (!any) return fail();
    }

    long long offset_seconds = 0;
    if (pos < s.size()) {
        const char c = s[pos];
        if (c == 'Z') {
            ++pos;
        } else if (c == '+' || c == '-') {
            ++pos;
            int oh, om;
            if (!read_digits(s, pos, 2, oh)) return fail();
            if (pos < s.size() && s[pos] == ':') ++pos;
            if (!read_digits(s, pos, 2, om)) return fail();
            if (oh > 23 || om > 59) return fail();
            offset_seconds = (c == '+' ? 1 : -1) * (oh * 3600LL + om * 60LL);
        } else {
            return fail();
        }
    }
    if (pos != s.size()) return fail();

    if (month < 1 || month > 12) return fail();
    if (day < 1 || day > static_cast<int>(days_in_month(year, static_cast<unsigned>(month)))) return fail();
    if (hour > 23 || minute > 59 || second > 59) return fail();

    const long long days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
    const long long local = days * 86400LL + hour * 3600LL + minute * 60LL + second;
    return static_cast<double>(local - offset_seconds) + fraction;
}

std::string format_timestamp_utc(double seconds) {
    const double whole = std::floor(seconds);
    long long t = static_cast<long long>(whole);
    long long days = t / 86400;
    long long rem = t % 86400;
    if (rem < 0) {
        rem += 86400;
        --days;
    }
    long long y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    const int hour = static_cast<int>(rem / 3600);
    const int minute = static_cast<int>((rem % 3600) / 60);
    const int second = static_cast<int>(rem % 60);
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%04lld-%02u-%02uT%02d:%02d:%02d", y, m, d, hour, minute, second);
    return buf;
}

void recompute_activity_set(EventLog& log) {
    std::set<std::string> labels;
    for (const auto& c : log.cases)
        for (const auto& e : c.events) labels.insert(e.activity);
    log.activity_set.assign(labels.begin(), labels.end());
}

EventLog load_csv(const std::string& path) {
    const CsvTable table = csv_read_file(path);
    const int col_case = table.column("case_id");
    const int col_act = table.column("activity");
    const int col_ts = table.column("timestamp");
    if (col_case < 0) throw DataError(path + ": missing column case_id");
    if (col_act < 0) throw DataError(path + ": missing column activity");
    if (col_ts < 0) throw DataError(path + ": missing column timestamp");
    if (table.rows.empty()) throw DataError(path + ": no event rows");

    struct Row {
        std::string activity;
        double timestamp;
        size_t file_order;
    };
    std::vector<std::string> case_order;
    std::unordered_map<std::string, std::vector<Row>> by_case;
    for (size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::string& cid = row[col_case];
        const std::string& act = row[col_act];
        if (cid.empty()) throw DataError(path + ": record " + std::to_string(r + 1) + ": empty case_id");
        if (act.empty()) throw DataError(path + ": record " + std::to_string(r + 1) + ": empty activity");
        double ts;
        try {
            ts = parse_timestamp(row[col_ts]);
        } catch (const ValueError& e) {
            throw DataError(path + ": record " + std::to_string(r + 1) + ": " + e.what());
        }
        auto it = by_case.find(cid);
        if (it == by_case.end()) {
            case_order.push_back(cid);
            it = by_case.emplace(cid, std::vector<Row>{}).first;
        }
        it->second.push_back({act, ts, r});
    }

    EventLog log;
    log.cases.reserve(case_order.size());
    for (const auto& cid : case_order) {
        auto& rows = by_case[cid];
        std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
            if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
            return a.file_order < b.file_order;
        });
        Case c;
        c.id = cid;
        c.events.reserve(rows.size());
        for (auto& row : rows) c.events.push_back({std::move(row.activity), row.timestamp});
        log.cases.push_back(std::move(c));
    }
    recompute_activity_set(log);
    return log;
}

void save_csv(const EventLog& log, const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& c : log.cases)
        for (const auto& e : c.events)
            rows.push_back({c.id, e.activity, format_timestamp_utc(e.timestamp)});
    csv_write_file(path, {"case_id", "activity", "timestamp"}, rows);
}

EventLog filter_short_cases(const EventLog& log, int min_events) {
    EventLog out;
    for (const auto& c : log.cases)
        if (static_cast<int>(c.events.size()) >= min_events) out.cases.push_back(c);
    recompute_activity_set(out);
    return out;
}

TimeFeatures derive_time_features(const Case& c) {
    TimeFeatures f;
    const size_t n = c.events.size();
    f.dt_prev.resize(n);
    f.dt_start.resize(n);
    f.remaining.resize(n);
    if (n == 0) return f;
    const double start = c.events.front().timestamp;
    const double finish = c.events.back().timestamp;
    for (size_t i = 0; i < n; ++i) {
        const double t = c.events[i].timestamp;
        f.dt_prev[i] = i == 0 ? 0.0 : t - c.events[i - 1].timestamp;
        f.dt_start[i] = t - start;
        f.remaining[i] = finish - t;
    }
    return f;
}

StatEntry fit_stat(const std::vector<double>& values) {
    StatEntry s;
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) {
        const double d = v - s.mean;
        sq += d * d;
    }
    s.stddev = std::sqrt(sq / static_cast<double>(values.size()));
    return s;
}

FeatureStats fit_feature_stats(const EventLog& train, const std::string& split_name) {
    std::vector<double> dt_prev, dt_start, rt;
    for (const auto& c : train.cases) {
        const TimeFeatures f = derive_time_features(c);
        dt_prev.insert(dt_prev.end(), f.dt_prev.begin(), f.dt_prev.end());
        dt_start.insert(dt_start.end(), f.dt_start.begin(), f.dt_start.end());
        rt.insert(rt.end(), f.remaining.begin(), f.remaining.end());
    }
    FeatureStats stats;
    stats.dt_prev = fit_stat(dt_prev);
    stats.dt_start = fit_stat(dt_start);
    stats.rt = fit_stat(rt);
    stats.fitted_on = split_name;
    return stats;
}

SplitResult unbiased_split(const EventLog& log, double test_fraction) {
    if (log.cases.size() < 2)
        throw DataError("chronological split needs at least 2 cases, got " +
                        std::to_string(log.cases.size()));
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw ConfigError("test fraction must be in (0, 1), got " + std::to_string(test_fraction));
    for (const auto& c : log.cases)
        if (c.events.empty()) throw DataError("case " + c.id + " has no events");

    std::vector<double> starts;
    starts.reserve(log.cases.size());
    for (const auto& c : log.cases) starts.push_back(c.events.front().timestamp);
    std::sort(starts.begin(), starts.end(), std::greater<double>());
    const size_t k = static_cast<size_t>(
        std::ceil(test_fraction * static_cast<double>(log.cases.size())));
    const double tau = starts[std::min(k, starts.size()) - 1];

    SplitResult result;
    result.tau = tau;
    for (const auto& c : log.cases) {
        const double start = c.events.front().timestamp;
        const double finish = c.events.back().timestamp;
        if (finish < tau)
            result.train.cases.push_back(c);
        else if (start >= tau)
            result.test.cases.push_back(c);
        else
            result.dropped.push_back(c.id);
    }
    recompute_activity_set(result.train);
    recompute_activity_set(result.test);
    return result;
}

Vocab build_vocab(const EventLog& train) {
    if (train.cases.empty()) throw DataError("cannot build vocabulary from an empty log");
    Vocab v;
    v.index_to_label = {"<pad>", "<eos>", "<unk>"};
    for (const auto& label : train.activity_set) v.index_to_label.push_back(label);
    for (size_t i = 0; i < v.index_to_label.size(); ++i)
        v.label_to_index[v.index_to_label[i]] = static_cast<int>(i);
    return v;
}

}  // namespace ppm
