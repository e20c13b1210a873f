#pragma once

// The three-part architecture: an input layer fusing activity embeddings with
// projected numeric features, a causal backbone (pre-norm transformer or
// stacked LSTM), and one linear head per task. Parameters live in a named
// registry; hierarchical names (input.*, backbone.block{i}.*, head.*) are the
// contract for checkpoints, freezing, and adapters.

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "ppm/encoding.hpp"
#include "ppm/ops.hpp"
#include "ppm/registry.hpp"

namespace ppm {

enum class Fusion { sum, concat };

struct InputLayerConfig {
    int vocab_size = 0;
    int embed_dim = 0;                  // E_cf
    int num_numeric = kNumericFeatures; // F
    int proj_dim = 0;                   // E_nf
    Fusion fusion = Fusion::sum;

    int fused_dim() const { return fusion == Fusion::sum ? embed_dim : embed_dim + proj_dim; }
};

enum class BackboneKind { transformer, recurrent };

struct BackboneConfig {
    BackboneKind kind = BackboneKind::transformer;
    int n_blocks = 0;
    int model_dim = 0;  // D
    int n_heads = 1;            // transformer only
    int ff_multiplier = 4;      // transformer only
    int max_seq_len = 512;      // transformer positional table
    double dropout = 0.1;
};

struct HeadConfig {
    bool na = true;
    bool rt = false;
};

struct ModelConfig {
    InputLayerConfig input;
    BackboneConfig backbone;
    HeadConfig heads;
};

void validate_model_config(const ModelConfig& cfg);

// LoRA adapter description; adapters target the attention projection classes
// listed in `targets` within every block.
struct LoraConfig {
    int rank = 0;
    double alpha = 0.0;
    std::vector<std::string> targets = {"q", "k", "v", "o"};
    double init_std = 0.02;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

template <typename T>
struct ForwardOutT {
    TensorT<T> features;   // B x L x D
    TensorT<T> na_logits;  // B x L x V_cf, undefined when the NA task is off
    TensorT<T> rt_pred;    // B x L x 1, undefined when the RT task is off
};

using ForwardOut = ForwardOutT<float>;

// Full forward pass over any scalar type; lora is nullptr for a plain model.
// The rng drives dropout masks and is consumed in a fixed op order.
template <typename T>
ForwardOutT<T> model_forward(const ModelConfig& cfg, const RegistryT<T>& reg, const EncodedBatch& batch,
                             std::mt19937& rng, bool training, const LoraConfig* lora = nullptr);

class Model {
  public:
    static Model init(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    Registry& registry() { return reg_; }
    const Registry& registry() const { return reg_; }

    const std::optional<LoraConfig>& lora() const { return lora_; }
    void set_lora(LoraConfig cfg) { lora_ = std::move(cfg); }
    void clear_lora() { lora_.reset(); }

    ForwardOut forward(const EncodedBatch& batch, std::mt19937& rng, bool training) const {
        return model_forward<float>(cfg_, reg_, batch, rng, training, lora_ ? &*lora_ : nullptr);
    }

    // Copies values from a loaded registry into this model's parameters.
    // Name sets must match exactly; shapes are checked per tensor.
    void load_values(const Registry& loaded);

  private:
    Model(ModelConfig cfg, Registry reg) : cfg_(std::move(cfg)), reg_(std::move(reg)) {}

    ModelConfig cfg_;
    Registry reg_;
    std::optional<LoraConfig> lora_;

    friend Model transplant_backbone(const Model& source, const InputLayerConfig& new_input,
                                     const HeadConfig& new_heads, uint64_t seed);
};

// New model with the source's backbone copied bitwise and freshly initialized
// input layer and heads. The source must have no adapters (merge first).
Model transplant_backbone(const Model& source, const InputLayerConfig& new_input,
                          const HeadConfig& new_heads, uint64_t seed);

uint32_t crc32_bytes(const uint8_t* data, size_t n);

void save_checkpoint(const Registry& reg, const std::string& path);
Registry load_checkpoint(const std::string& path);

}  // namespace ppm
