#include "ppm/peft.hpp"

#include <algorithm>
#include <set>

namespace ppm {

namespace {

bool is_backbone(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

bool is_adapter(const std::string& name) {
    return name.find(".lora_") != std::string::npos;
}

PeftPartition partition_of(const Model& model) {
    PeftPartition part;
    for (const auto& name : model.registry().order) {
        if (is_adapter(name)) {
            part.adapters.push_back(name);
        } else if (model.registry().at(name).trainable) {
            part.trainable.push_back(name);
        } else {
            part.frozen.push_back(name);
        }
    }
    return part;
}

}  // namespace

PeftPartition apply_freeze(Model& model, const FreezeConfig& cfg) {
    auto& reg = model.registry();
    const int n_blocks = model.config().backbone.n_blocks;
    for (const auto& name : reg.order) reg.set_trainable(name, !is_backbone(name));
    if (cfg.mode == FreezeMode::partial) {
        if (cfg.layer_indices.empty())
            throw ConfigError("partial freezing needs at least one layer index");
        std::set<int> keep;
        for (int raw : cfg.layer_indices) {
            const int idx = raw < 0 ? n_blocks + raw : raw;
            if (idx < 0 || idx >= n_blocks)
                throw ConfigError("layer index " + std::to_string(raw) + " out of range for " +
                                  std::to_string(n_blocks) + " blocks");
            keep.insert(idx);
        }
        for (int idx : keep) {
            const std::string prefix = "backbone.block" + std::to_string(idx) + ".";
            for (const auto& name : reg.order)
                if (name.rfind(prefix, 0) == 0) reg.set_trainable(name, true);
        }
    }
    return partition_of(model);
}

PeftPartition apply_lora(Model& model, const LoraConfig& cfg, uint64_t seed) {
    if (model.config().backbone.kind != BackboneKind::transformer)
        throw ConfigError("adapters target attention projections; the recurrent backbone has none");
    if (model.config().backbone.n_blocks == 0)
        throw ConfigError("adapters need at least one attention block");
    if (cfg.rank < 1) throw ConfigError("adapter rank must be >= 1");
    if (cfg.targets.empty()) throw ConfigError("adapter target list is empty");
    for (const auto& t : cfg.targets)
        if (t != "q" && t != "k" && t != "v" && t != "o")
            throw ConfigError("unknown adapter target '" + t + "' (expected q, k, v, or o)");
    if (model.lora()) throw ValueError("model already has adapters");

    auto& reg = model.registry();
    const int d = model.config().backbone.model_dim;
    const int n_blocks = model.config().backbone.n_blocks;

    PeftPartition part;
    if (cfg.rank >= d)
        part.warnings.push_back("adapter rank " + std::to_string(cfg.rank) +
                                " >= matrix dim " + std::to_string(d) + "; adapters are not low-rank");

    for (const auto& name : reg.order) reg.set_trainable(name, !is_backbone(name));

    std::mt19937 rng(static_cast<uint32_t>(splitmix64(seed)));
    const std::set<std::string> wanted(cfg.targets.begin(), cfg.targets.end());
    for (int i = 0; i < n_blocks; ++i) {
        for (const char* m : {"q", "k", "v", "o"}) {
            if (!wanted.count(m)) continue;
            const std::string base = "backbone.block" + std::to_string(i) + ".attn." + m;
            auto& a = reg.add(base + ".lora_A", {cfg.rank, d});
            for (auto& v : a.data()) v = static_cast<float>(truncated_normal(rng, cfg.init_std));
            reg.add(base + ".lora_B", {d, cfg.rank});  // zeros, so adapters start as no-ops
        }
    }

    model.set_lora(cfg);
    auto full = partition_of(model);
    full.warnings = std::move(part.warnings);
    return full;
}

Model merge_lora(const Model& model) {
    if (!model.lora()) throw ValueError("model has no adapters to merge");
    const double s = model.lora()->scaling();
    const auto& src = model.registry();

    Model out = Model::init(model.config(), 0);
    auto& dst = out.registry();
    for (const auto& name : dst.order) dst.tensor(name).data() = src.tensor(name).data();

    for (const auto& name : src.order) {
        const std::string tail = ".lora_A";
        if (name.size() < tail.size() || name.compare(name.size() - tail.size(), tail.size(), tail) != 0)
            continue;
        const std::string base = name.substr(0, name.size() - tail.size());
        const auto& a = src.tensor(base + ".lora_A");  // r x d
        const auto& bmat = src.tensor(base + ".lora_B");  // d x r
        auto& w = dst.tensor(base + ".w");  // d x d
        const int r = a.shape()[0];
        const int din = a.shape()[1];
        const int dout = bmat.shape()[0];
        for (int o = 0; o < dout; ++o)
            for (int i = 0; i < din; ++i) {
                double dot = 0.0;
                for (int k = 0; k < r; ++k)
                    dot += static_cast<double>(bmat.data()[o * r + k]) *
                           static_cast<double>(a.data()[k * din + i]);
                w.data()[o * din + i] += static_cast<float>(s * dot);
            }
    }
    return out;
}

ParamCounts count_params(const Model& model) {
    ParamCounts c;
    for (const auto& name : model.registry().order) {
        const auto& entry = model.registry().at(name);
        const int64_t n = entry.tensor.numel();
        c.total += n;
        if (entry.trainable) c.trainable += n;
    }
    return c;
}

}  // namespace ppm
