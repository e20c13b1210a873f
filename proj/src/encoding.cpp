#include "ppm/encoding.hpp"

#include <algorithm>
#include <numeric>

namespace ppm {

EncodedTrace encode_trace(const Case& c, const Vocab& vocab, const FeatureStats& stats) {
    const int n = static_cast<int>(c.events.size());
    if (n < 2) throw DataError("case " + c.id + " has " + std::to_string(n) + " events, need at least 2");

    const TimeFeatures f = derive_time_features(c);
    EncodedTrace t;
    t.n = n;
    t.x_act.resize(n);
    t.x_num.resize(static_cast<size_t>(n) * kNumericFeatures);
    t.y_act.resize(n);
    t.y_rt.resize(n);
    for (int i = 0; i < n; ++i) {
        t.x_act[i] = vocab.id(c.events[i].activity);
        t.x_num[static_cast<size_t>(i) * kNumericFeatures + 0] = zscore(f.dt_prev[i], stats.dt_prev);
        t.x_num[static_cast<size_t>(i) * kNumericFeatures + 1] = zscore(f.dt_start[i], stats.dt_start);
        t.y_act[i] = i + 1 < n ? vocab.id(c.events[i + 1].activity) : Vocab::eos_id;
        t.y_rt[i] = zscore(f.remaining[i], stats.rt);
    }
    return t;
}

std::vector<EncodedBatch> make_batches(const std::vector<EncodedTrace>& traces, int batch_size,
                                       uint64_t shuffle_seed, int max_len) {
    if (traces.empty()) throw DataError("no traces to batch");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1, got " + std::to_string(batch_size));

    std::vector<size_t> order(traces.size());
    std::iota(order.begin(), order.end(), size_t{0});
    deterministic_shuffle(order, shuffle_seed);

    const auto clipped = [max_len](int n) { return max_len > 0 ? std::min(n, max_len) : n; };

    std::vector<EncodedBatch> batches;
    for (size_t at = 0; at < order.size(); at += batch_size) {
        const size_t count = std::min(static_cast<size_t>(batch_size), order.size() - at);
        int len = 0;
        for (size_t b = 0; b < count; ++b) len = std::max(len, clipped(traces[order[at + b]].n));

        EncodedBatch batch;
        batch.batch = static_cast<int>(count);
        batch.len = len;
        batch.x_act.assign(count * len, Vocab::pad_id);
        batch.x_num.assign(count * len * kNumericFeatures, 0.0f);
        batch.y_act.assign(count * len, Vocab::pad_id);
        batch.y_rt.assign(count * len, 0.0f);
        batch.mask.assign(count * len, 0);
        for (size_t b = 0; b < count; ++b) {
            const EncodedTrace& t = traces[order[at + b]];
            const int n = clipped(t.n);
            for (int i = 0; i < n; ++i) {
                const size_t dst = b * len + i;
                batch.x_act[dst] = t.x_act[i];
                batch.y_act[dst] = t.y_act[i];
                batch.y_rt[dst] = static_cast<float>(t.y_rt[i]);
                batch.mask[dst] = 1;
                for (int j = 0; j < kNumericFeatures; ++j)
                    batch.x_num[dst * kNumericFeatures + j] =
                        static_cast<float>(t.x_num[static_cast<size_t>(i) * kNumericFeatures + j]);
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace ppm
