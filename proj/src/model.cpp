#include "ppm/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace ppm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

void validate_model_config(const ModelConfig& cfg) {
    const auto& in = cfg.input;
    const auto& bb = cfg.backbone;
    if (in.vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
    if (in.embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (in.num_numeric < 0) throw ConfigError("num_numeric must be >= 0");
    if (in.proj_dim < 1) throw ConfigError("proj_dim must be >= 1");
    if (in.fusion == Fusion::sum && in.embed_dim != in.proj_dim)
        throw ConfigError("sum fusion needs embed_dim == proj_dim, got " +
                          std::to_string(in.embed_dim) + " and " + std::to_string(in.proj_dim));
    if (bb.n_blocks < 0) throw ConfigError("n_blocks must be >= 0");
    if (bb.model_dim < 1) throw ConfigError("model_dim must be >= 1");
    if (!(bb.dropout >= 0.0 && bb.dropout < 1.0))
        throw ConfigError("dropout must be in [0, 1), got " + std::to_string(bb.dropout));
    if (bb.kind == BackboneKind::transformer) {
        if (bb.n_heads < 1) throw ConfigError("n_heads must be >= 1");
        if (bb.model_dim % bb.n_heads != 0)
            throw ConfigError("model_dim " + std::to_string(bb.model_dim) +
                              " not divisible by n_heads " + std::to_string(bb.n_heads));
        if (bb.ff_multiplier < 1) throw ConfigError("ff_multiplier must be >= 1");
        if (bb.max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
    }
    if (bb.kind == BackboneKind::recurrent && bb.n_blocks == 0 && in.fused_dim() != bb.model_dim)
        throw ConfigError("n_blocks=0 recurrent backbone needs fused dim E == model_dim D");
    if (!cfg.heads.na && !cfg.heads.rt) throw ConfigError("at least one task head required");
}

namespace {

bool transformer_needs_in_proj(const ModelConfig& cfg) {
    return cfg.backbone.kind == BackboneKind::transformer &&
           cfg.input.fused_dim() != cfg.backbone.model_dim;
}

// Registers every parameter in the fixed order that defines checkpoint layout.
Registry build_registry(const ModelConfig& cfg) {
    Registry reg;
    const int e = cfg.input.fused_dim();
    const int d = cfg.backbone.model_dim;
    reg.add("input.embed", {cfg.input.vocab_size, cfg.input.embed_dim});
    reg.add("input.num_proj", {cfg.input.proj_dim, cfg.input.num_numeric});
    if (cfg.backbone.kind == BackboneKind::transformer) {
        if (transformer_needs_in_proj(cfg)) {
            reg.add("backbone.in_proj.w", {d, e});
            reg.add("backbone.in_proj.b", {d});
        }
        reg.add("backbone.pos", {cfg.backbone.max_seq_len, d});
        const int ff = cfg.backbone.ff_multiplier * d;
        for (int i = 0; i < cfg.backbone.n_blocks; ++i) {
            const std::string p = "backbone.block" + std::to_string(i) + ".";
            reg.add(p + "ln1.g", {d});
            reg.add(p + "ln1.b", {d});
            for (const char* m : {"q", "k", "v", "o"}) {
                reg.add(p + "attn." + m + ".w", {d, d});
                reg.add(p + "attn." + m + ".b", {d});
            }
            reg.add(p + "ln2.g", {d});
            reg.add(p + "ln2.b", {d});
            reg.add(p + "ff1.w", {ff, d});
            reg.add(p + "ff1.b", {ff});
            reg.add(p + "ff2.w", {d, ff});
            reg.add(p + "ff2.b", {d});
        }
    } else {
        for (int i = 0; i < cfg.backbone.n_blocks; ++i) {
            const std::string p = "backbone.block" + std::to_string(i) + ".";
            const int in_width = i == 0 ? e : d;
            reg.add(p + "wx", {4 * d, in_width});
            reg.add(p + "wh", {4 * d, d});
            reg.add(p + "b", {4 * d});
        }
    }
    if (cfg.heads.na) {
        reg.add("head.na.w", {cfg.input.vocab_size, d});
        reg.add("head.na.b", {cfg.input.vocab_size});
    }
    if (cfg.heads.rt) {
        reg.add("head.rt.w", {1, d});
        reg.add("head.rt.b", {1});
    }
    return reg;
}

bool name_ends_with(const std::string& name, const char* suffix) {
    const size_t n = std::strlen(suffix);
    return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
}

}  // namespace

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
    validate_model_config(cfg);
    Registry reg = build_registry(cfg);
    std::mt19937 rng(static_cast<uint32_t>(splitmix64(seed)));
    for (const auto& name : reg.order) {
        auto& t = reg.tensor(name);
        if (name_ends_with(name, ".g")) {
            std::fill(t.data().begin(), t.data().end(), 1.0f);
        } else if (!name_ends_with(name, ".b")) {
            // embeddings, positional table, and weight matrices
            for (auto& v : t.data()) v = static_cast<float>(truncated_normal(rng, 0.02));
        }
        // biases and layer-norm biases stay zero
    }
    return Model(cfg, std::move(reg));
}

void Model::load_values(const Registry& loaded) {
    std::set<std::string> expected(reg_.order.begin(), reg_.order.end());
    std::set<std::string> given(loaded.order.begin(), loaded.order.end());
    for (const auto& name : expected)
        if (!given.count(name)) throw DataError("checkpoint is missing tensor " + name);
    for (const auto& name : given)
        if (!expected.count(name)) throw DataError("checkpoint has unexpected tensor " + name);
    for (const auto& name : reg_.order) {
        const auto& src = loaded.tensor(name);
        auto& dst = reg_.tensor(name);
        if (src.shape() != dst.shape())
            throw DataError("tensor " + name + " has shape " + shape_str(src.shape()) +
                            ", model expects " + shape_str(dst.shape()));
        dst.data() = src.data();
    }
}

template <typename T>
ForwardOutT<T> model_forward(const ModelConfig& cfg, const RegistryT<T>& reg, const EncodedBatch& batch,
                             std::mt19937& rng, bool training, const LoraConfig* lora) {
    const int b = batch.batch;
    const int l = batch.len;
    const int d = cfg.backbone.model_dim;
    const double p_drop = cfg.backbone.dropout;

    std::vector<T> xnum_data(batch.x_num.size());
    for (size_t i = 0; i < xnum_data.size(); ++i) xnum_data[i] = static_cast<T>(batch.x_num[i]);
    auto xnum = TensorT<T>::from({b, l, cfg.input.num_numeric}, std::move(xnum_data));

    auto emb = embedding(batch.x_act, b, l, reg.tensor("input.embed"));
    auto proj = linear(xnum, reg.tensor("input.num_proj"));
    TensorT<T> h = cfg.input.fusion == Fusion::sum ? add(emb, proj) : concat_last(emb, proj);

    if (cfg.backbone.kind == BackboneKind::transformer) {
        if (l > cfg.backbone.max_seq_len)
            throw DataError("sequence length " + std::to_string(l) + " exceeds max_seq_len " +
                            std::to_string(cfg.backbone.max_seq_len));
        if (transformer_needs_in_proj(cfg))
            h = linear(h, reg.tensor("backbone.in_proj.w"), reg.tensor("backbone.in_proj.b"));
        h = add_position(h, reg.tensor("backbone.pos"));
        const int heads = cfg.backbone.n_heads;
        const int dh = d / heads;
        for (int i = 0; i < cfg.backbone.n_blocks; ++i) {
            const std::string p = "backbone.block" + std::to_string(i) + ".";
            const auto adapted = [&](const TensorT<T>& x, const std::string& m) {
                auto y = linear(x, reg.tensor(p + "attn." + m + ".w"), reg.tensor(p + "attn." + m + ".b"));
                const std::string a_name = p + "attn." + m + ".lora_A";
                if (lora && reg.has(a_name)) {
                    auto low = linear(linear(x, reg.tensor(a_name)), reg.tensor(p + "attn." + m + ".lora_B"));
                    y = add(y, scale(low, static_cast<T>(lora->scaling())));
                }
                return y;
            };

            auto a = layer_norm(h, reg.tensor(p + "ln1.g"), reg.tensor(p + "ln1.b"));
            auto to_heads = [&](TensorT<T> x) { return permute_0213(reshape(x, {b, l, heads, dh})); };
            auto q = to_heads(adapted(a, "q"));
            auto k = to_heads(adapted(a, "k"));
            auto v = to_heads(adapted(a, "v"));
            auto scores = scale(bmm_t(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
            auto probs = softmax_last(causal_mask_fill(scores));
            probs = dropout(probs, p_drop, rng, training);
            auto mixed = reshape(permute_0213(bmm(probs, v)), {b, l, d});
            auto attn_out = dropout(adapted(mixed, "o"), p_drop, rng, training);
            h = add(h, attn_out);

            auto f = layer_norm(h, reg.tensor(p + "ln2.g"), reg.tensor(p + "ln2.b"));
            f = linear(f, reg.tensor(p + "ff1.w"), reg.tensor(p + "ff1.b"));
            f = gelu(f);
            f = linear(f, reg.tensor(p + "ff2.w"), reg.tensor(p + "ff2.b"));
            f = dropout(f, p_drop, rng, training);
            h = add(h, f);
        }
    } else {
        for (int i = 0; i < cfg.backbone.n_blocks; ++i) {
            const std::string p = "backbone.block" + std::to_string(i) + ".";
            const auto& wx = reg.tensor(p + "wx");
            const auto& wh = reg.tensor(p + "wh");
            const auto& bias = reg.tensor(p + "b");
            TensorT<T> hidden = TensorT<T>::zeros({b, d});
            TensorT<T> cell = TensorT<T>::zeros({b, d});
            std::vector<TensorT<T>> outputs;
            outputs.reserve(l);
            for (int t = 0; t < l; ++t) {
                auto gates = add(linear(select_time(h, t), wx, bias), linear(hidden, wh));
                auto gi = sigmoid(slice_last(gates, 0, d));
                auto gf = sigmoid(slice_last(gates, d, d));
                auto gg = tanh_op(slice_last(gates, 2 * d, d));
                auto go = sigmoid(slice_last(gates, 3 * d, d));
                cell = add(mul(gf, cell), mul(gi, gg));
                hidden = mul(go, tanh_op(cell));
                outputs.push_back(hidden);
            }
            h = dropout(stack_time(outputs), p_drop, rng, training);
        }
    }

    ForwardOutT<T> out;
    out.features = h;
    if (cfg.heads.na) out.na_logits = linear(h, reg.tensor("head.na.w"), reg.tensor("head.na.b"));
    if (cfg.heads.rt) out.rt_pred = linear(h, reg.tensor("head.rt.w"), reg.tensor("head.rt.b"));
    return out;
}

template ForwardOutT<float> model_forward<float>(const ModelConfig&, const RegistryT<float>&,
                                                 const EncodedBatch&, std::mt19937&, bool,
                                                 const LoraConfig*);
template ForwardOutT<double> model_forward<double>(const ModelConfig&, const RegistryT<double>&,
                                                   const EncodedBatch&, std::mt19937&, bool,
                                                   const LoraConfig*);

Model transplant_backbone(const Model& source, const InputLayerConfig& new_input,
                          const HeadConfig& new_heads, uint64_t seed) {
    if (source.lora())
        throw ValueError("source model has adapters; merge them before transplanting");
    ModelConfig cfg;
    cfg.input = new_input;
    cfg.backbone = source.config().backbone;
    cfg.heads = new_heads;
    if (new_input.fused_dim() != source.config().input.fused_dim())
        throw ConfigError("transplant fused dim mismatch: new input E=" +
                          std::to_string(new_input.fused_dim()) + ", source backbone expects E=" +
                          std::to_string(source.config().input.fused_dim()));
    Model target = Model::init(cfg, seed);
    for (const auto& name : source.registry().order) {
        if (name.rfind("backbone.", 0) != 0) continue;
        target.registry().tensor(name).data() = source.registry().tensor(name).data();
    }
    return target;
}

uint32_t crc32_bytes(const uint8_t* data, size_t n) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace {

template <typename T>
void append_le(std::vector<uint8_t>& out, T value) {
    uint8_t buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

struct ByteReader {
    const std::vector<uint8_t>& bytes;
    size_t pos = 0;
    const std::string& path;

    template <typename T>
    T take() {
        if (pos + sizeof(T) > bytes.size()) throw DataError(path + ": truncated checkpoint");
        T value;
        std::memcpy(&value, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return value;
    }

    std::string take_string(size_t n) {
        if (pos + n > bytes.size()) throw DataError(path + ": truncated checkpoint");
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Registry& reg, const std::string& path) {
    std::vector<uint8_t> header;
    header.insert(header.end(), {'P', 'P', 'M', 'T'});
    append_le(header, kCheckpointVersion);
    append_le(header, static_cast<uint32_t>(reg.order.size()));
    std::vector<uint8_t> payload;
    for (const auto& name : reg.order) {
        const auto& t = reg.tensor(name);
        append_le(header, static_cast<uint32_t>(name.size()));
        header.insert(header.end(), name.begin(), name.end());
        append_le(header, static_cast<uint32_t>(t.shape().size()));
        for (int dim : t.shape()) append_le(header, static_cast<uint64_t>(dim));
        append_le(header, static_cast<uint32_t>(0));  // dtype float32
        const size_t at = payload.size();
        payload.resize(at + t.numel() * sizeof(float));
        std::memcpy(payload.data() + at, t.data().data(), t.numel() * sizeof(float));
    }
    const uint32_t crc = crc32_bytes(payload.data(), payload.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    char crc_bytes[4];
    std::memcpy(crc_bytes, &crc, 4);
    out.write(crc_bytes, 4);
    if (!out) throw IoError("failed writing " + path);
}

Registry load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    ByteReader r{bytes, 0, path};
    if (r.take_string(4) != "PPMT") throw DataError(path + ": bad magic, not a checkpoint");
    const uint32_t version = r.take<uint32_t>();
    if (version != kCheckpointVersion)
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    const uint32_t count = r.take<uint32_t>();

    Registry reg;
    std::vector<std::string> names;
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = r.take<uint32_t>();
        const std::string name = r.take_string(name_len);
        const uint32_t rank = r.take<uint32_t>();
        Shape shape;
        for (uint32_t k = 0; k < rank; ++k) {
            const uint64_t dim = r.take<uint64_t>();
            if (dim == 0 || dim > (1ull << 31))
                throw DataError(path + ": tensor " + name + " has invalid dim " + std::to_string(dim));
            shape.push_back(static_cast<int>(dim));
        }
        const uint32_t dtype = r.take<uint32_t>();
        if (dtype != 0)
            throw DataError(path + ": tensor " + name + " has unsupported dtype " + std::to_string(dtype));
        reg.add(name, std::move(shape));
        names.push_back(name);
    }
    const size_t payload_start = r.pos;
    size_t payload_size = 0;
    for (const auto& name : names) payload_size += reg.tensor(name).numel() * sizeof(float);
    if (payload_start + payload_size + 4 != bytes.size())
        throw DataError(path + ": truncated checkpoint");
    size_t at = payload_start;
    for (const auto& name : names) {
        auto& t = reg.tensor(name);
        std::memcpy(t.data().data(), bytes.data() + at, t.numel() * sizeof(float));
        at += t.numel() * sizeof(float);
    }
    uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + at, 4);
    const uint32_t computed = crc32_bytes(bytes.data() + payload_start, payload_size);
    if (stored_crc != computed) throw DataError(path + ": checksum mismatch");
    return reg;
}

}  // namespace ppm
