#pragma once

// Adaptation strategies over a pretrained model: freeze the whole backbone,
// freeze all but chosen blocks, or attach low-rank adapters to the attention
// projections. Each strategy partitions the parameter set into frozen,
// trainable, and adapter groups; the optimizer only ever sees trainable ones.

#include <cstdint>
#include <string>
#include <vector>

#include "ppm/model.hpp"

namespace ppm {

enum class FreezeMode { full, partial };

struct FreezeConfig {
    FreezeMode mode = FreezeMode::full;
    std::vector<int> layer_indices;  // partial only; negatives count from the end
};

struct PeftPartition {
    std::vector<std::string> frozen;
    std::vector<std::string> trainable;
    std::vector<std::string> adapters;
    std::vector<std::string> warnings;
};

// Freezes backbone parameters (all of them, or all but the listed blocks).
// Input layer and heads always stay trainable.
PeftPartition apply_freeze(Model& model, const FreezeConfig& cfg);

// Attaches rank-r adapters to the targeted attention projections of every
// block, freezes the backbone, and leaves adapters plus I/O layers trainable.
PeftPartition apply_lora(Model& model, const LoraConfig& cfg, uint64_t seed);

// New model with every adapter folded into its base weight (W += s * B * A)
// and no adapters; all parameters come back trainable.
Model merge_lora(const Model& model);

struct ParamCounts {
    int64_t total = 0;
    int64_t trainable = 0;

    double trainable_pct() const {
        return total == 0 ? 0.0 : 100.0 * static_cast<double>(trainable) / static_cast<double>(total);
    }
};

ParamCounts count_params(const Model& model);

}  // namespace ppm
