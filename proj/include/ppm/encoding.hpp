#pragma once

// Teacher-forced trace encoding and padded batching. Each position i of a
// trace carries the activity and time features of event i; the targets are
// the next activity (with <eos> after the last event) and the normalized
// remaining time measured at event i.

#include <cstdint>
#include <vector>

#include "ppm/event_log.hpp"

namespace ppm {

inline constexpr int kNumericFeatures = 2;  // {dt_prev, dt_start}

struct EncodedTrace {
    std::vector<int> x_act;
    std::vector<double> x_num;  // n * kNumericFeatures, row-major
    std::vector<int> y_act;     // shifted left, <eos> appended
    std::vector<double> y_rt;   // normalized remaining time at each position
    int n = 0;
};

EncodedTrace encode_trace(const Case& c, const Vocab& vocab, const FeatureStats& stats);

struct EncodedBatch {
    int batch = 0;
    int len = 0;
    std::vector<int> x_act;      // batch * len, <pad> on padding
    std::vector<float> x_num;    // batch * len * kNumericFeatures, 0 on padding
    std::vector<int> y_act;      // batch * len, <pad> on padding
    std::vector<float> y_rt;     // batch * len, 0 on padding
    std::vector<uint8_t> mask;   // batch * len, 1 on real positions
};

// Deterministic shuffle by seed, then fixed-size groups padded to each
// group's longest trace. max_len > 0 truncates longer traces to their first
// max_len positions.
std::vector<EncodedBatch> make_batches(const std::vector<EncodedTrace>& traces, int batch_size,
                                       uint64_t shuffle_seed, int max_len = 0);

}  // namespace ppm
