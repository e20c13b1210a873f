#pragma once

// Event-log ingestion and preprocessing: CSV loading, short-case filtering,
// per-event time features, z-score statistics, the leakage-free chronological
// split, and the activity vocabulary.

#include <string>
#include <unordered_map>
#include <vector>

#include "ppm/common.hpp"

namespace ppm {

struct Event {
    std::string activity;
    double timestamp;  // seconds since the Unix epoch, UTC
};

struct Case {
    std::string id;
    std::vector<Event> events;  // sorted by timestamp, file order on ties
};

struct EventLog {
    std::vector<Case> cases;
    std::vector<std::string> activity_set;  // sorted unique labels
};

void recompute_activity_set(EventLog& log);

// Accepts YYYY-MM-DD{T or space}HH:MM:SS with optional fractional seconds and
// optional Z / +HH:MM / -HH:MM offset; naive timestamps are taken as UTC.
double parse_timestamp(const std::string& text);
std::string format_timestamp_utc(double seconds);

EventLog load_csv(const std::string& path);
void save_csv(const EventLog& log, const std::string& path);

EventLog filter_short_cases(const EventLog& log, int min_events = 2);

struct TimeFeatures {
    std::vector<double> dt_prev;    // seconds since previous event, 0 at the first
    std::vector<double> dt_start;   // seconds since case start
    std::vector<double> remaining;  // seconds until case end, 0 at the last
};

TimeFeatures derive_time_features(const Case& c);

struct StatEntry {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
};

StatEntry fit_stat(const std::vector<double>& values);

// (x - mean) / std, and 0 whenever std is 0.
inline double zscore(double x, const StatEntry& s) {
    return s.stddev == 0.0 ? 0.0 : (x - s.mean) / s.stddev;
}

struct FeatureStats {
    StatEntry dt_prev;
    StatEntry dt_start;
    StatEntry rt;  // remaining-time target has its own normalization
    std::string fitted_on;
};

FeatureStats fit_feature_stats(const EventLog& train, const std::string& split_name = "train");

struct SplitResult {
    EventLog train;
    EventLog test;
    std::vector<std::string> dropped;  // case ids straddling the split instant
    double tau;
};

// Chronological split with no case in two partitions: tau is the latest event
// timestamp with at least test_fraction of case starts at or after it. Cases
// ending before tau train, cases starting at or after tau test, straddlers
// are dropped.
SplitResult unbiased_split(const EventLog& log, double test_fraction = 0.2);

struct Vocab {
    static constexpr int pad_id = 0;
    static constexpr int eos_id = 1;
    static constexpr int unk_id = 2;

    std::vector<std::string> index_to_label;  // [<pad>, <eos>, <unk>, sorted labels...]
    std::unordered_map<std::string, int> label_to_index;

    int id(const std::string& label) const {
        auto it = label_to_index.find(label);
        return it == label_to_index.end() ? unk_id : it->second;
    }
    int size() const { return static_cast<int>(index_to_label.size()); }
};

Vocab build_vocab(const EventLog& train);

}  // namespace ppm
