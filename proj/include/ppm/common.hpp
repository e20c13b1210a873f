#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ppm {

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// User-facing input problems (bad files, bad columns, bad config). CLI maps these to exit 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a training run hits a non-finite loss.
struct TrainAbort : std::runtime_error {
    int epoch;
    int batch_index;
    TrainAbort(int epoch_, int batch_, const std::string& what_)
        : std::runtime_error(what_), epoch(epoch_), batch_index(batch_) {}
};

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// splitmix64: seed mixing for derived streams (per-epoch shuffles, per-case walks).
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

// Uniform in [0,1) from the top 24 bits; identical across platforms for a given engine state.
inline double uniform01(std::mt19937& rng) {
    return static_cast<double>(rng() >> 8) * (1.0 / 16777216.0);
}

// Box-Muller standard normal. std::normal_distribution is implementation-defined,
// so checkpoint-reproducible initialization needs its own sampler.
inline double normal_sample(std::mt19937& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    const double two_pi = 6.283185307179586;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

// Normal(0, std) truncated at two standard deviations.
inline double truncated_normal(std::mt19937& rng, double stddev) {
    double z = normal_sample(rng);
    while (z < -2.0 || z > 2.0) z = normal_sample(rng);
    return z * stddev;
}

// Deterministic Fisher-Yates (std::shuffle's element order is implementation-defined).
template <typename T>
void deterministic_shuffle(std::vector<T>& v, uint64_t seed) {
    std::mt19937 rng(static_cast<uint32_t>(splitmix64(seed)));
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(v[i - 1], v[j < i ? j : i - 1]);
    }
}

}  // namespace ppm
