#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ppm/gradcheck.hpp"
#include "ppm/model.hpp"
#include "ppm/optimizer.hpp"
#include "ppm/ops.hpp"
#include "ppm/peft.hpp"

using namespace ppm;

namespace {

ModelConfig tiny_transformer(int vocab = 8, int dim = 8, int blocks = 2, int heads = 2,
                             int max_len = 8) {
    ModelConfig cfg;
    cfg.input.vocab_size = vocab;
    cfg.input.embed_dim = dim;
    cfg.input.proj_dim = dim;
    cfg.input.fusion = Fusion::sum;
    cfg.backbone.kind = BackboneKind::transformer;
    cfg.backbone.n_blocks = blocks;
    cfg.backbone.model_dim = dim;
    cfg.backbone.n_heads = heads;
    cfg.backbone.max_seq_len = max_len;
    cfg.backbone.dropout = 0.0;
    cfg.heads.na = true;
    cfg.heads.rt = true;
    return cfg;
}

ModelConfig tiny_lstm(int vocab = 8, int dim = 8, int blocks = 1) {
    ModelConfig cfg = tiny_transformer(vocab, dim, blocks);
    cfg.backbone.kind = BackboneKind::recurrent;
    return cfg;
}

// Deterministic small batch with every position real.
EncodedBatch toy_batch(int batch, int len, int vocab, uint64_t seed = 13) {
    EncodedBatch b;
    b.batch = batch;
    b.len = len;
    std::mt19937 rng(static_cast<uint32_t>(seed));
    for (int i = 0; i < batch * len; ++i) {
        b.x_act.push_back(3 + static_cast<int>(rng() % static_cast<uint32_t>(vocab - 3)));
        b.y_act.push_back(1 + static_cast<int>(rng() % static_cast<uint32_t>(vocab - 1)));
        b.y_rt.push_back(static_cast<float>(uniform01(rng) * 2 - 1));
        b.mask.push_back(1);
        for (int f = 0; f < kNumericFeatures; ++f)
            b.x_num.push_back(static_cast<float>(uniform01(rng) * 2 - 1));
    }
    return b;
}

template <typename T>
TensorT<T> joint_loss(const ModelConfig& cfg, const RegistryT<T>& reg, const EncodedBatch& batch,
                      const LoraConfig* lora = nullptr) {
    std::mt19937 rng(1);
    const auto out = model_forward<T>(cfg, reg, batch, rng, false, lora);
    const int n = batch.batch * batch.len;
    auto loss = cross_entropy_masked(reshape(out.na_logits, {n, cfg.input.vocab_size}),
                                     batch.y_act, batch.mask);
    std::vector<T> rt_target(batch.y_rt.begin(), batch.y_rt.end());
    return add(loss, mse_masked(reshape(out.rt_pred, {n}), rt_target, batch.mask));
}

bool same_data(const Registry& a, const Registry& b, const std::string& name) {
    return a.tensor(name).data() == b.tensor(name).data();
}

}  // namespace

TEST_CASE("config validation rejects bad combinations") {
    ModelConfig cfg = tiny_transformer();
    CHECK_NOTHROW(validate_model_config(cfg));

    ModelConfig bad = cfg;
    bad.input.proj_dim = 4;  // sum fusion with E_cf != E_nf
    CHECK_THROWS_AS(validate_model_config(bad), ConfigError);

    bad = cfg;
    bad.backbone.n_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(validate_model_config(bad), ConfigError);

    bad = cfg;
    bad.heads.na = false;
    bad.heads.rt = false;
    CHECK_THROWS_AS(validate_model_config(bad), ConfigError);

    bad = tiny_lstm();
    bad.backbone.n_blocks = 0;
    bad.input.embed_dim = bad.input.proj_dim = 4;  // E=4 != D=8 with no blocks
    CHECK_THROWS_AS(validate_model_config(bad), ConfigError);

    bad = cfg;
    bad.backbone.dropout = 1.0;
    CHECK_THROWS_AS(validate_model_config(bad), ConfigError);
}

TEST_CASE("initialization is deterministic in the seed") {
    const ModelConfig cfg = tiny_transformer();
    const Model a = Model::init(cfg, 5);
    const Model b = Model::init(cfg, 5);
    const Model c = Model::init(cfg, 6);
    REQUIRE(a.registry().order == b.registry().order);
    for (const auto& name : a.registry().order) CHECK(same_data(a.registry(), b.registry(), name));
    bool any_diff = false;
    for (const auto& name : a.registry().order)
        if (!same_data(a.registry(), c.registry(), name)) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("biases start at zero and norm gains at one") {
    const Model m = Model::init(tiny_transformer(), 3);
    for (float v : m.registry().tensor("backbone.block0.attn.q.b").data()) CHECK(v == 0.0f);
    for (float v : m.registry().tensor("backbone.block0.ln1.b").data()) CHECK(v == 0.0f);
    for (float v : m.registry().tensor("backbone.block0.ln1.g").data()) CHECK(v == 1.0f);
    for (float v : m.registry().tensor("head.na.b").data()) CHECK(v == 0.0f);
}

TEST_CASE("one transformer block with D=8 H=2 FF4 holds 872 parameters") {
    const Model m = Model::init(tiny_transformer(8, 8, 1, 2), 1);
    size_t block = 0;
    for (const auto& name : m.registry().order)
        if (name.rfind("backbone.block0.", 0) == 0) block += m.registry().tensor(name).numel();
    CHECK(block == 872);
}

TEST_CASE("forward shapes follow the config") {
    const EncodedBatch batch = toy_batch(2, 5, 8);
    std::mt19937 rng(1);

    const Model t = Model::init(tiny_transformer(), 1);
    const auto out = t.forward(batch, rng, false);
    CHECK(out.features.shape() == Shape{2, 5, 8});
    CHECK(out.na_logits.shape() == Shape{2, 5, 8});
    CHECK(out.rt_pred.shape() == Shape{2, 5, 1});

    ModelConfig na_only = tiny_transformer();
    na_only.heads.rt = false;
    const auto out_na = Model::init(na_only, 1).forward(batch, rng, false);
    CHECK(out_na.na_logits.defined());
    CHECK(!out_na.rt_pred.defined());

    const auto out_lstm = Model::init(tiny_lstm(), 1).forward(batch, rng, false);
    CHECK(out_lstm.features.shape() == Shape{2, 5, 8});

    ModelConfig cc = tiny_transformer();
    cc.input.embed_dim = 8;
    cc.input.proj_dim = 8;
    cc.input.fusion = Fusion::concat;  // E = 16 != D = 8, bridged by a projection
    const Model wide = Model::init(cc, 1);
    CHECK(wide.registry().has("backbone.in_proj.w"));
    CHECK(wide.registry().tensor("backbone.in_proj.w").shape() == Shape{8, 16});
    CHECK(wide.forward(batch, rng, false).features.shape() == Shape{2, 5, 8});
}

TEST_CASE("zeroed input parameters give zero fused activations") {
    ModelConfig cfg = tiny_transformer(8, 4, 0, 1, 6);
    Model m = Model::init(cfg, 2);
    for (const char* name : {"input.embed", "input.num_proj", "backbone.pos"})
        std::fill(m.registry().tensor(name).data().begin(), m.registry().tensor(name).data().end(), 0.0f);
    std::mt19937 rng(1);
    const auto out = m.forward(toy_batch(2, 4, 8), rng, false);
    for (float v : out.features.data()) CHECK(v == 0.0f);
}

TEST_CASE("zero blocks with matching dims is identity plus positions") {
    ModelConfig cfg = tiny_transformer(8, 4, 0, 1, 6);
    const Model m = Model::init(cfg, 7);
    const EncodedBatch batch = toy_batch(2, 3, 8);
    std::mt19937 rng(1);
    const auto out = m.forward(batch, rng, false);

    const auto& embed = m.registry().tensor("input.embed");
    const auto& proj = m.registry().tensor("input.num_proj");
    const auto& pos = m.registry().tensor("backbone.pos");
    const int e = 4;
    for (int b = 0; b < 2; ++b)
        for (int l = 0; l < 3; ++l)
            for (int j = 0; j < e; ++j) {
                const int id = batch.x_act[b * 3 + l];
                float fused = embed.data()[id * e + j];
                float lin = 0.0f;
                for (int f = 0; f < kNumericFeatures; ++f)
                    lin += proj.data()[j * kNumericFeatures + f] *
                           batch.x_num[(b * 3 + l) * kNumericFeatures + f];
                const float expect = (fused + lin) + pos.data()[l * e + j];
                CHECK(out.features.data()[(b * 3 + l) * e + j] == expect);
            }
}

TEST_CASE("sequences longer than the positional table are rejected") {
    const Model m = Model::init(tiny_transformer(8, 8, 1, 2, 4), 1);
    std::mt19937 rng(1);
    CHECK_THROWS_AS(m.forward(toy_batch(1, 5, 8), rng, false), DataError);
}

TEST_CASE("out-of-vocabulary indices are rejected") {
    const Model m = Model::init(tiny_transformer(8), 1);
    EncodedBatch batch = toy_batch(1, 3, 8);
    batch.x_act[1] = 8;
    std::mt19937 rng(1);
    CHECK_THROWS_AS(m.forward(batch, rng, false), IndexError);
}

TEST_CASE("both backbones are causal") {
    const EncodedBatch base = toy_batch(1, 6, 8, 21);
    for (const ModelConfig& cfg : {tiny_transformer(), tiny_lstm()}) {
        const Model m = Model::init(cfg, 9);
        std::mt19937 rng(1);
        const auto clean = m.forward(base, rng, false);

        for (int j = 1; j < 6; ++j) {
            EncodedBatch poked = base;
            poked.x_act[j] = 3 + (poked.x_act[j] - 3 + 1) % 5;
            poked.x_num[j * kNumericFeatures] += 1.5f;
            std::mt19937 rng2(1);
            const auto out = m.forward(poked, rng2, false);
            const int v = 8;
            for (int i = 0; i < j; ++i)
                for (int c = 0; c < v; ++c)
                    CHECK(out.na_logits.data()[i * v + c] == clean.na_logits.data()[i * v + c]);
            bool later_changed = false;
            for (int i = j; i < 6; ++i)
                for (int c = 0; c < v; ++c)
                    if (out.na_logits.data()[i * v + c] != clean.na_logits.data()[i * v + c])
                        later_changed = true;
            CHECK(later_changed);
        }
    }
}

TEST_CASE("dropout masks reproduce under the same rng seed") {
    ModelConfig cfg = tiny_transformer(8, 8, 2, 2, 8);
    cfg.backbone.dropout = 0.3;
    const Model m = Model::init(cfg, 4);
    const EncodedBatch batch = toy_batch(2, 4, 8);

    std::mt19937 r1(77), r2(77), r3(78);
    const auto a = model_forward<float>(cfg, m.registry(), batch, r1, true, nullptr);
    const auto b = model_forward<float>(cfg, m.registry(), batch, r2, true, nullptr);
    const auto c = model_forward<float>(cfg, m.registry(), batch, r3, true, nullptr);
    CHECK(a.na_logits.data() == b.na_logits.data());
    CHECK(a.na_logits.data() != c.na_logits.data());

    // evaluation ignores dropout entirely
    std::mt19937 r4(1), r5(2);
    const auto e1 = model_forward<float>(cfg, m.registry(), batch, r4, false, nullptr);
    const auto e2 = model_forward<float>(cfg, m.registry(), batch, r5, false, nullptr);
    CHECK(e1.na_logits.data() == e2.na_logits.data());
}

TEST_CASE("training a full model updates every registered tensor") {
    for (const ModelConfig& cfg : {tiny_transformer(8, 8, 2, 2, 4), tiny_lstm(8, 8, 2)}) {
        Model m = Model::init(cfg, 11);
        const EncodedBatch batch = toy_batch(2, 4, 8);
        std::vector<std::vector<float>> before;
        for (const auto& name : m.registry().order) before.push_back(m.registry().tensor(name).data());

        AdamConfig ac;
        ac.lr = 1e-2;
        Adam opt(ac);
        m.registry().zero_grad();
        auto loss = joint_loss<float>(cfg, m.registry(), batch);
        loss.backward();
        opt.step(m.registry());

        for (size_t i = 0; i < m.registry().order.size(); ++i) {
            const auto& name = m.registry().order[i];
            CHECK_MESSAGE(m.registry().tensor(name).data() != before[i], "unchanged tensor: ", name);
        }
    }
}

TEST_CASE("analytic gradients match finite differences on the full model") {
    for (const ModelConfig& cfg : {tiny_transformer(8, 8, 2, 2, 4), tiny_lstm(8, 8, 1)}) {
        const Model m = Model::init(cfg, 42);
        auto dreg = m.registry().cast<double>();
        const EncodedBatch batch = toy_batch(2, 3, 8);
        const auto report = finite_diff_check(
            dreg, [&]() { return joint_loss<double>(cfg, dreg, batch); });
        CHECK(report.elements_checked > 0);
        CHECK_MESSAGE(report.max_rel_error < 1e-4, "worst: ", report.worst_param, "[",
                      report.worst_index, "] rel ", report.max_rel_error);
    }
}

TEST_CASE("checkpoint round trip is bit-exact") {
    const Model m = Model::init(tiny_transformer(), 31);
    const std::string path =
        (std::filesystem::temp_directory_path() / "ppm_ckpt_roundtrip.bin").string();
    save_checkpoint(m.registry(), path);
    const Registry back = load_checkpoint(path);
    REQUIRE(back.order == m.registry().order);
    for (const auto& name : back.order) {
        CHECK(back.tensor(name).shape() == m.registry().tensor(name).shape());
        CHECK(back.tensor(name).data() == m.registry().tensor(name).data());
    }

    Model fresh = Model::init(tiny_transformer(), 99);
    fresh.load_values(back);
    for (const auto& name : back.order)
        CHECK(same_data(fresh.registry(), m.registry(), name));
}

TEST_CASE("crc32 matches the reference vector") {
    const char* s = "123456789";
    CHECK(crc32_bytes(reinterpret_cast<const uint8_t*>(s), 9) == 0xCBF43926u);
    CHECK(crc32_bytes(nullptr, 0) == 0x00000000u);
}

TEST_CASE("corrupted checkpoints are rejected") {
    const Model m = Model::init(tiny_transformer(8, 4, 1, 1, 4), 8);
    const std::string path =
        (std::filesystem::temp_directory_path() / "ppm_ckpt_corrupt.bin").string();
    save_checkpoint(m.registry(), path);

    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const auto rewrite = [&](std::vector<char> copy) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(copy.data(), static_cast<std::streamsize>(copy.size()));
    };

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    rewrite(bad_magic);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"), DataError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    rewrite(bad_version);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), DataError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 5);
    rewrite(truncated);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), DataError);

    auto flipped = bytes;
    flipped[flipped.size() - 5] ^= 0x40;  // last payload byte
    rewrite(flipped);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("checksum"), DataError);

    rewrite(bytes);
    CHECK_NOTHROW(load_checkpoint(path));
}

TEST_CASE("loading into an incompatible config names the offending tensor") {
    const Model small = Model::init(tiny_transformer(8), 1);
    const std::string path =
        (std::filesystem::temp_directory_path() / "ppm_ckpt_mismatch.bin").string();
    save_checkpoint(small.registry(), path);
    const Registry loaded = load_checkpoint(path);

    Model bigger_vocab = Model::init(tiny_transformer(12), 1);
    CHECK_THROWS_WITH_AS(bigger_vocab.load_values(loaded), doctest::Contains("input.embed"),
                         DataError);

    ModelConfig fewer = tiny_transformer();
    fewer.backbone.n_blocks = 1;
    Model shallow = Model::init(fewer, 1);
    CHECK_THROWS_WITH_AS(shallow.load_values(loaded), doctest::Contains("backbone.block1"),
                         DataError);
}

TEST_CASE("backbone transplant copies backbone and reinitializes the rest") {
    const Model source = Model::init(tiny_transformer(8), 17);
    InputLayerConfig new_input = source.config().input;
    new_input.vocab_size = 10;  // 7 labels + 3 specials
    HeadConfig heads;
    heads.na = true;
    heads.rt = false;
    const Model target = transplant_backbone(source, new_input, heads, 18);

    for (const auto& name : target.registry().order) {
        if (name.rfind("backbone.", 0) == 0) {
            CHECK(target.registry().tensor(name).data() == source.registry().tensor(name).data());
        }
    }
    CHECK(target.registry().tensor("head.na.w").shape() == Shape{10, 8});
    CHECK(target.registry().tensor("input.embed").shape() == Shape{10, 8});
    CHECK(!target.registry().has("head.rt.w"));
    // fresh draws differ from the source
    const auto& src_embed = source.registry().tensor("input.embed").data();
    const auto& dst_embed = target.registry().tensor("input.embed").data();
    bool differs = false;
    for (size_t i = 0; i < std::min(src_embed.size(), dst_embed.size()); ++i)
        if (src_embed[i] != dst_embed[i]) differs = true;
    CHECK(differs);

    InputLayerConfig wrong = new_input;
    wrong.embed_dim = wrong.proj_dim = 4;
    CHECK_THROWS_AS(transplant_backbone(source, wrong, heads, 1), ConfigError);

    Model adapted = Model::init(tiny_transformer(8), 17);
    LoraConfig lc;
    lc.rank = 2;
    lc.alpha = 4;
    apply_lora(adapted, lc, 5);
    CHECK_THROWS_AS(transplant_backbone(adapted, new_input, heads, 1), ValueError);
}
