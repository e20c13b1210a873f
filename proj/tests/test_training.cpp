#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ppm/encoding.hpp"
#include "ppm/model.hpp"
#include "ppm/peft.hpp"
#include "ppm/synthetic.hpp"
#include "ppm/training.hpp"

using namespace ppm;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("ppm_train_" + name)).string();
}

ModelConfig tiny_transformer(int vocab, int dim = 16, int blocks = 1, int heads = 2,
                             int max_len = 16) {
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

// Builds a log from activity sequences; case i starts at 1000*i and event
// gaps vary so the time features have nonzero variance.
EventLog make_log(const std::vector<std::vector<std::string>>& traces) {
    EventLog log;
    for (size_t i = 0; i < traces.size(); ++i) {
        Case c;
        char id[32];
        std::snprintf(id, sizeof(id), "case_%03zu", i);
        c.id = id;
        double t = 1000.0 * static_cast<double>(i);
        for (size_t j = 0; j < traces[i].size(); ++j) {
            c.events.push_back({traces[i][j], t});
            t += 30.0 * static_cast<double>(1 + (i + j) % 3);
        }
        log.cases.push_back(c);
    }
    recompute_activity_set(log);
    return log;
}

struct EncodedLog {
    std::vector<EncodedTrace> traces;
    Vocab vocab;
    FeatureStats stats;
};

EncodedLog encode_log(const EventLog& log, const Vocab* vocab = nullptr,
                      const FeatureStats* stats = nullptr) {
    EncodedLog out;
    out.vocab = vocab ? *vocab : build_vocab(log);
    out.stats = stats ? *stats : fit_feature_stats(log);
    for (const auto& c : log.cases) out.traces.push_back(encode_trace(c, out.vocab, out.stats));
    return out;
}

// Alternating two-activity log: next activity is a function of the current
// one except at the end-of-case position, so it is learnable but not trivial.
EventLog alternating_log(int n_cases, int len = 4) {
    std::vector<std::vector<std::string>> traces;
    for (int i = 0; i < n_cases; ++i) {
        std::vector<std::string> t;
        for (int j = 0; j < len; ++j) t.push_back(j % 2 == 0 ? "ping" : "pong");
        traces.push_back(t);
    }
    return make_log(traces);
}

bool metric_eq(double a, double b) {
    return (std::isnan(a) && std::isnan(b)) || a == b;
}

bool rows_equal_ignoring_seconds(const std::vector<EpochRow>& a, const std::vector<EpochRow>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].epoch != b[i].epoch || a[i].split != b[i].split ||
            !metric_eq(a[i].na_loss, b[i].na_loss) || !metric_eq(a[i].rt_loss, b[i].rt_loss) ||
            !metric_eq(a[i].na_acc, b[i].na_acc) || !metric_eq(a[i].rt_mse, b[i].rt_mse))
            return false;
    return true;
}

ForwardOutT<double> uniform_out(const EncodedBatch& b, int vocab) {
    ForwardOutT<double> out;
    out.na_logits = TensorT<double>::zeros({b.batch, b.len, vocab});
    std::vector<double> rt(b.y_rt.begin(), b.y_rt.end());
    out.rt_pred = TensorT<double>::from({b.batch, b.len, 1}, rt);
    return out;
}

}  // namespace

TEST_CASE("task mode names round trip and reject unknowns") {
    for (TaskMode m : {TaskMode::na, TaskMode::rt, TaskMode::multi})
        CHECK(task_mode_from_name(task_mode_name(m)) == m);
    CHECK_THROWS_AS(task_mode_from_name("both"), ConfigError);
}

TEST_CASE("train config validation catalogs bad settings") {
    const ModelConfig model = tiny_transformer(8);
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(validate_train_config(cfg, model), ConfigError);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(validate_train_config(cfg, model), ConfigError);
    cfg = {};
    cfg.learning_rate = -1e-3;
    CHECK_THROWS_AS(validate_train_config(cfg, model), ConfigError);
    cfg = {};
    cfg.w_na = -0.5;
    CHECK_THROWS_AS(validate_train_config(cfg, model), ConfigError);
    cfg = {};
    cfg.w_na = 0.0;
    cfg.w_rt = 0.0;
    CHECK_THROWS_AS(validate_train_config(cfg, model), ConfigError);
    cfg = {};
    cfg.val_fraction = 1.0;
    CHECK_THROWS_AS(validate_train_config(cfg, model), ConfigError);

    ModelConfig no_na = model;
    no_na.heads.na = false;
    cfg = {};
    cfg.task_mode = TaskMode::na;
    CHECK_THROWS_AS(validate_train_config(cfg, no_na), ConfigError);
    ModelConfig no_rt = model;
    no_rt.heads.rt = false;
    cfg.task_mode = TaskMode::rt;
    CHECK_THROWS_AS(validate_train_config(cfg, no_rt), ConfigError);
    cfg.task_mode = TaskMode::multi;
    CHECK_THROWS_AS(validate_train_config(cfg, no_rt), ConfigError);
    cfg = {};
    CHECK_NOTHROW(validate_train_config(cfg, model));
}

TEST_CASE("uniform logits with perfect remaining time give loss ln 4") {
    EncodedBatch b;
    b.batch = 1;
    b.len = 2;
    b.x_act = {3, 3};
    b.x_num.assign(2 * kNumericFeatures, 0.0f);
    b.y_act = {2, 1};
    b.y_rt = {0.5f, -0.25f};
    b.mask = {1, 1};
    const auto out = uniform_out(b, 4);

    TrainConfig cfg;
    cfg.task_mode = TaskMode::multi;
    const double loss = task_loss<double>(out, b, cfg, 4).item();
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("zero remaining-time weight equals the pure next-activity loss") {
    EncodedBatch b;
    b.batch = 2;
    b.len = 3;
    b.x_act.assign(6, 3);
    b.x_num.assign(6 * kNumericFeatures, 0.1f);
    b.y_act = {1, 2, 3, 2, 1, 3};
    b.y_rt = {1.0f, 0.5f, 0.0f, -1.0f, 2.0f, 0.25f};
    b.mask.assign(6, 1);
    ForwardOutT<double> out;
    out.na_logits = TensorT<double>::from(
        {2, 3, 4}, {0.3, -1, 2, 0.5, 1, 1, -2, 0, 0.1, 0.2, 0.3, 0.4,
                    -0.5, 0.5, 0, 1, 2, -2, 1, 0, 0.7, 0.7, -0.7, 0});
    out.rt_pred = TensorT<double>::full({2, 3, 1}, 9.0);

    TrainConfig na_cfg;
    na_cfg.task_mode = TaskMode::na;
    TrainConfig multi_cfg;
    multi_cfg.task_mode = TaskMode::multi;
    multi_cfg.w_rt = 0.0;
    CHECK(task_loss<double>(out, b, multi_cfg, 4).item() ==
          task_loss<double>(out, b, na_cfg, 4).item());
}

TEST_CASE("fully padded extra rows leave the loss unchanged") {
    EncodedBatch b;
    b.batch = 1;
    b.len = 3;
    b.x_act = {3, 4, 5};
    b.x_num.assign(3 * kNumericFeatures, 0.2f);
    b.y_act = {4, 5, 1};
    b.y_rt = {1.5f, 0.5f, 0.0f};
    b.mask = {1, 1, 1};
    ForwardOutT<double> out;
    out.na_logits = TensorT<double>::from({1, 3, 6}, {0.1, 2, -1, 0.5, 0, 1, 1, -1, 0.2, 0.4, 2, 0,
                                                      -0.3, 1, 0.9, 0, 0.1, 0.2});
    out.rt_pred = TensorT<double>::from({1, 3, 1}, {1.0, 0.25, 0.5});
    TrainConfig cfg;
    const double base = task_loss<double>(out, b, cfg, 6).item();

    EncodedBatch padded = b;
    padded.batch = 2;
    padded.x_act.insert(padded.x_act.end(), {0, 0, 0});
    padded.x_num.insert(padded.x_num.end(), 3 * kNumericFeatures, 0.0f);
    padded.y_act.insert(padded.y_act.end(), {0, 0, 0});
    padded.y_rt.insert(padded.y_rt.end(), {0.0f, 0.0f, 0.0f});
    padded.mask.insert(padded.mask.end(), {0, 0, 0});
    ForwardOutT<double> padded_out;
    std::vector<double> logits = out.na_logits.data();
    logits.insert(logits.end(), 18, 5.0);
    padded_out.na_logits = TensorT<double>::from({2, 3, 6}, logits);
    std::vector<double> rt = out.rt_pred.data();
    rt.insert(rt.end(), {7.0, -7.0, 7.0});
    padded_out.rt_pred = TensorT<double>::from({2, 3, 1}, rt);

    CHECK(task_loss<double>(padded_out, padded, cfg, 6).item() == base);
}

TEST_CASE("zero learning rate leaves parameters unchanged with a flat curve") {
    const EventLog log = alternating_log(6);
    const EncodedLog enc = encode_log(log);
    Model model = Model::init(tiny_transformer(enc.vocab.size()), 5);
    std::vector<std::vector<float>> before;
    for (const auto& name : model.registry().order)
        before.push_back(model.registry().tensor(name).data());

    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 9;
    const TrainReport report = train(model, enc.traces, {}, cfg);

    size_t i = 0;
    for (const auto& name : model.registry().order)
        CHECK(model.registry().tensor(name).data() == before[i++]);
    REQUIRE(report.rows.size() == 3);
    // Reshuffling regroups the ragged batches each epoch, so the float
    // reductions agree only to rounding even though no parameter moved.
    CHECK(report.rows[1].na_loss == doctest::Approx(report.rows[0].na_loss).epsilon(1e-6));
    CHECK(report.rows[2].na_loss == doctest::Approx(report.rows[0].na_loss).epsilon(1e-6));
    CHECK(report.rows[2].rt_loss == doctest::Approx(report.rows[0].rt_loss).epsilon(1e-6));
    CHECK(report.best_epoch == 1);
}

TEST_CASE("eight unique traces are memorized within 500 epochs") {
    const std::vector<std::string> acts = {"a", "b", "c", "d", "e", "f", "g", "h"};
    std::vector<std::vector<std::string>> traces;
    for (int i = 0; i < 8; ++i) {
        std::vector<std::string> t = {acts[i]};
        for (int j = 1; j <= 2 + i % 3; ++j) t.push_back(acts[(i + 3 * j) % 8]);
        traces.push_back(t);
    }
    const EncodedLog enc = encode_log(make_log(traces));
    Model model = Model::init(tiny_transformer(enc.vocab.size(), 24, 1, 2), 3);

    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 8;
    cfg.epochs = 500;
    cfg.seed = 4;
    const TrainReport report = train(model, enc.traces, {}, cfg);

    bool memorized = false;
    for (const auto& r : report.rows)
        if (r.split == "train" && r.na_acc == 1.0 && r.rt_mse < 0.01) memorized = true;
    CHECK(memorized);
}

TEST_CASE("same seed and config produce identical reports") {
    const EventLog log = alternating_log(8);
    const auto [fit_log, val_log] = split_validation(log, 0.25);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);

    ModelConfig mc = tiny_transformer(fit.vocab.size());
    mc.backbone.dropout = 0.2;
    TrainConfig cfg;
    cfg.learning_rate = 5e-3;
    cfg.epochs = 4;
    cfg.batch_size = 3;
    cfg.seed = 21;

    Model a = Model::init(mc, 77);
    const TrainReport ra = train(a, fit.traces, val.traces, cfg);
    Model b = Model::init(mc, 77);
    const TrainReport rb = train(b, fit.traces, val.traces, cfg);

    CHECK(rows_equal_ignoring_seconds(ra.rows, rb.rows));
    CHECK(ra.best_epoch == rb.best_epoch);
    CHECK(ra.best_val_loss == rb.best_val_loss);
    CHECK(ra.total_params == rb.total_params);
    CHECK(ra.trainable_params == rb.trainable_params);
    for (const auto& name : a.registry().order)
        CHECK(a.registry().tensor(name).data() == b.registry().tensor(name).data());
}

TEST_CASE("single-task NA and multi-task with zero RT weight share the NA trajectory") {
    const EventLog log = alternating_log(8);
    const auto [fit_log, val_log] = split_validation(log, 0.25);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);
    const ModelConfig mc = tiny_transformer(fit.vocab.size());

    TrainConfig na_cfg;
    na_cfg.task_mode = TaskMode::na;
    na_cfg.learning_rate = 5e-3;
    na_cfg.epochs = 4;
    na_cfg.batch_size = 3;
    na_cfg.seed = 2;
    TrainConfig multi_cfg = na_cfg;
    multi_cfg.task_mode = TaskMode::multi;
    multi_cfg.w_rt = 0.0;

    Model na_model = Model::init(mc, 31);
    Model multi_model = Model::init(mc, 31);
    const std::vector<float> rt_w = multi_model.registry().tensor("head.rt.w").data();
    const TrainReport na_rep = train(na_model, fit.traces, val.traces, na_cfg);
    const TrainReport multi_rep = train(multi_model, fit.traces, val.traces, multi_cfg);

    REQUIRE(na_rep.rows.size() == multi_rep.rows.size());
    for (size_t i = 0; i < na_rep.rows.size(); ++i) {
        CHECK(na_rep.rows[i].na_loss == multi_rep.rows[i].na_loss);
        CHECK(metric_eq(na_rep.rows[i].na_acc, multi_rep.rows[i].na_acc));
        CHECK(std::isnan(na_rep.rows[i].rt_loss));
        CHECK_FALSE(std::isnan(multi_rep.rows[i].rt_loss));
    }
    CHECK(multi_model.registry().tensor("head.rt.w").data() == rt_w);
}

TEST_CASE("an echoing model scores perfect accuracy and a zeroed head scores none") {
    const EventLog log = make_log({{"a", "b", "c"}, {"a", "b", "c"}, {"a", "b", "c"}});
    const EncodedLog enc = encode_log(log);
    REQUIRE(enc.vocab.size() == 6);

    ModelConfig mc = tiny_transformer(6, 6, 0);
    mc.backbone.kind = BackboneKind::recurrent;
    Model model = Model::init(mc, 0);
    auto& reg = model.registry();
    auto fill = [&](const std::string& name, float v) {
        for (float& x : reg.tensor(name).data()) x = v;
    };
    fill("input.embed", 0.0f);
    fill("input.num_proj", 0.0f);
    fill("head.na.w", 0.0f);
    fill("head.na.b", 0.0f);
    for (int x : {3, 4, 5}) reg.tensor("input.embed").data()[x * 6 + x] = 10.0f;
    const int next[6] = {0, 0, 0, 4, 5, 1};
    for (int x : {3, 4, 5}) reg.tensor("head.na.w").data()[next[x] * 6 + x] = 10.0f;

    TrainConfig cfg;
    cfg.task_mode = TaskMode::na;
    const EvalResult echo = evaluate(model, enc.traces, cfg);
    CHECK(echo.na_acc == 1.0);
    CHECK(echo.na_acc_no_eos == 1.0);
    CHECK(echo.positions == 9);

    fill("head.na.w", 0.0f);
    const EvalResult blank = evaluate(model, enc.traces, cfg);
    CHECK(blank.na_acc == 0.0);
}

TEST_CASE("a constant-zero predictor has unit MSE on normalized targets") {
    EventLog log = alternating_log(10, 5);
    const EncodedLog enc = encode_log(log);
    ModelConfig mc = tiny_transformer(enc.vocab.size());
    Model model = Model::init(mc, 1);
    for (float& x : model.registry().tensor("head.rt.w").data()) x = 0.0f;
    for (float& x : model.registry().tensor("head.rt.b").data()) x = 0.0f;

    TrainConfig cfg;
    cfg.task_mode = TaskMode::rt;
    const EvalResult r = evaluate(model, enc.traces, cfg);
    CHECK(r.rt_mse == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(std::isnan(r.na_loss));
}

TEST_CASE("evaluation counts only real positions across ragged batches") {
    const EventLog log = make_log({{"a", "b", "c"}, {"a", "b", "c", "a", "b"}});
    const EncodedLog enc = encode_log(log);
    Model model = Model::init(tiny_transformer(enc.vocab.size()), 2);
    TrainConfig cfg;
    CHECK(evaluate(model, enc.traces, cfg).positions == 8);
}

TEST_CASE("validation split takes the chronologically last cases") {
    const EventLog log = make_log({{"a", "b"}, {"a", "b"}, {"a", "b"}, {"a", "b"}, {"a", "b"},
                                   {"a", "b"}, {"a", "b"}, {"a", "b"}, {"a", "b"}, {"a", "b"}});
    const auto [fit, val] = split_validation(log, 0.1);
    REQUIRE(val.cases.size() == 1);
    CHECK(val.cases[0].id == "case_009");
    CHECK(fit.cases.size() == 9);
    CHECK(fit.cases[0].id == "case_000");

    const auto [fit35, val35] = split_validation(log, 0.35);
    REQUIRE(val35.cases.size() == 4);
    CHECK(val35.cases.front().id == "case_006");
    CHECK(val35.cases.back().id == "case_009");

    const auto [all, none] = split_validation(log, 0.0);
    CHECK(all.cases.size() == 10);
    CHECK(none.cases.empty());

    EventLog single = make_log({{"a", "b"}});
    CHECK(split_validation(single, 0.5).second.cases.empty());
    CHECK_THROWS_AS(split_validation(log, 1.0), ConfigError);
    CHECK_THROWS_AS(split_validation(log, -0.1), ConfigError);
}

TEST_CASE("non-finite loss aborts with epoch and batch diagnostics") {
    const EncodedLog enc = encode_log(alternating_log(4));
    Model model = Model::init(tiny_transformer(enc.vocab.size()), 6);
    model.registry().tensor("head.na.b").data()[0] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 2;
    try {
        train(model, enc.traces, {}, cfg);
        FAIL("expected TrainAbort");
    } catch (const TrainAbort& e) {
        CHECK(e.epoch == 1);
        CHECK(e.batch_index == 0);
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
    CHECK_THROWS_AS(train(model, {}, {}, cfg), DataError);
}

TEST_CASE("the model returned by training reproduces its best validation loss") {
    const EventLog log = alternating_log(12);
    const auto [fit_log, val_log] = split_validation(log, 0.25);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);
    Model model = Model::init(tiny_transformer(fit.vocab.size()), 8);

    TrainConfig cfg;
    cfg.learning_rate = 0.5;
    cfg.epochs = 6;
    cfg.batch_size = 4;
    cfg.seed = 3;
    const TrainReport report = train(model, fit.traces, val.traces, cfg);

    REQUIRE(report.best_epoch >= 1);
    double recorded = kNan;
    for (const auto& r : report.rows)
        if (r.split == "val" && r.epoch == report.best_epoch) recorded = r.na_loss + r.rt_loss;
    CHECK(recorded == report.best_val_loss);

    const EvalResult again = evaluate(model, val.traces, cfg, cfg.batch_size);
    CHECK(again.na_loss + again.rt_loss == report.best_val_loss);
}

TEST_CASE("full-freeze training lowers loss while the backbone stays bitwise fixed") {
    const EncodedLog enc = encode_log(alternating_log(10));
    Model model = Model::init(tiny_transformer(enc.vocab.size()), 12);
    FreezeConfig fc;
    fc.mode = FreezeMode::full;
    apply_freeze(model, fc);
    std::vector<std::pair<std::string, std::vector<float>>> frozen;
    for (const auto& name : model.registry().order)
        if (!model.registry().at(name).trainable)
            frozen.emplace_back(name, model.registry().tensor(name).data());
    REQUIRE_FALSE(frozen.empty());

    TrainConfig cfg;
    cfg.task_mode = TaskMode::na;
    cfg.learning_rate = 5e-3;
    cfg.epochs = 8;
    cfg.batch_size = 5;
    const TrainReport report = train(model, enc.traces, {}, cfg);

    for (const auto& [name, data] : frozen)
        CHECK(model.registry().tensor(name).data() == data);
    CHECK(report.rows.back().na_loss < report.rows.front().na_loss);
}

TEST_CASE("a deterministic grammar is learned to perfect validation accuracy") {
    const ProcessGrammar g = parse_grammar(
        "start s0\n"
        "end fin\n"
        "transition s0 plan s1 1.0\n"
        "transition s1 build s2 1.0\n"
        "transition s2 test s3 1.0\n"
        "transition s3 ship fin 1.0\n"
        "duration plan 3600 600\n"
        "duration build 7200 900\n"
        "duration test 1800 300\n"
        "duration ship 600 60\n");
    const EventLog log = generate_log(g, 60, 17);
    const auto [fit_log, val_log] = split_validation(log, 0.1);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);

    Model model = Model::init(tiny_transformer(fit.vocab.size()), 5);
    TrainConfig cfg;
    cfg.task_mode = TaskMode::na;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 25;
    cfg.batch_size = 16;
    cfg.seed = 6;
    train(model, fit.traces, val.traces, cfg);
    CHECK(evaluate(model, val.traces, cfg).na_acc == 1.0);
}

TEST_CASE("validation accuracy respects the Bayes bound on a stochastic grammar") {
    const ProcessGrammar g = load_grammar(std::string(PPM_SOURCE_DIR) + "/data/grammars/g1.grammar");
    const double bayes = bayes_optimal_encoded_accuracy(g);
    const EventLog log = generate_log(g, 400, 23);
    const auto [fit_log, val_log] = split_validation(log, 0.2);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);

    Model model = Model::init(tiny_transformer(fit.vocab.size()), 41);
    TrainConfig cfg;
    cfg.task_mode = TaskMode::na;
    cfg.learning_rate = 5e-3;
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.seed = 14;
    train(model, fit.traces, val.traces, cfg);

    const EvalResult r = evaluate(model, val.traces, cfg);
    const double sigma =
        std::sqrt(bayes * (1.0 - bayes) / static_cast<double>(std::max<long long>(1, r.positions)));
    CHECK(r.na_acc <= bayes + 3.0 * sigma);
    CHECK(r.na_acc > 0.5);
}

TEST_CASE("curve CSV round trips exactly with empty cells for absent metrics") {
    const EventLog log = alternating_log(8);
    const auto [fit_log, val_log] = split_validation(log, 0.25);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);
    Model model = Model::init(tiny_transformer(fit.vocab.size()), 19);

    TrainConfig cfg;
    cfg.task_mode = TaskMode::na;
    cfg.learning_rate = 5e-3;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    const TrainReport report = train(model, fit.traces, val.traces, cfg);
    REQUIRE(report.rows.size() == 6);

    const std::string path = temp_path("curves.csv");
    export_curves(report, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,split,na_loss,rt_loss,na_acc,rt_mse,seconds");
    std::string line;
    while (std::getline(in, line)) {
        CHECK(line.find(",,") != std::string::npos);
        CHECK(line.find(",0,") == std::string::npos);
    }
    in.close();

    const std::vector<EpochRow> back = import_curves(path);
    REQUIRE(back.size() == report.rows.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].epoch == report.rows[i].epoch);
        CHECK(back[i].split == report.rows[i].split);
        CHECK(metric_eq(back[i].na_loss, report.rows[i].na_loss));
        CHECK(metric_eq(back[i].rt_loss, report.rows[i].rt_loss));
        CHECK(metric_eq(back[i].na_acc, report.rows[i].na_acc));
        CHECK(metric_eq(back[i].rt_mse, report.rows[i].rt_mse));
        CHECK(metric_eq(back[i].seconds, report.rows[i].seconds));
    }
    std::filesystem::remove(path);

    std::ofstream bad(path);
    bad << "epoch,split,na_loss\n1,train,0.5\n";
    bad.close();
    CHECK_THROWS_AS(import_curves(path), DataError);
    std::filesystem::remove(path);
}

TEST_CASE("a one-entry grid matches a direct train and evaluate run") {
    const EventLog log = alternating_log(8);
    const auto [fit_log, val_log] = split_validation(log, 0.25);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);

    GridEntry e;
    e.name = "solo";
    e.model = tiny_transformer(fit.vocab.size());
    e.train.learning_rate = 5e-3;
    e.train.epochs = 3;
    e.train.batch_size = 4;
    e.train.seed = 33;

    const std::string path = temp_path("grid_one.csv");
    std::filesystem::remove(path);
    const auto results = grid_search({e}, fit.traces, val.traces, path);
    REQUIRE(results.size() == 1);
    CHECK(results[0].status == "ok");

    Model model = Model::init(e.model, e.train.seed);
    const TrainReport rep = train(model, fit.traces, val.traces, e.train);
    const EvalResult ev = evaluate(model, val.traces, e.train, e.train.batch_size);
    CHECK(results[0].val_loss == rep.best_val_loss);
    CHECK(results[0].na_acc == ev.na_acc);
    CHECK(results[0].rt_mse == ev.rt_mse);
    std::filesystem::remove(path);
}

TEST_CASE("grid ranking puts a learning config above a frozen one and failures last") {
    const EventLog log = alternating_log(10);
    const auto [fit_log, val_log] = split_validation(log, 0.2);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);

    GridEntry frozen;
    frozen.name = "zero-lr";
    frozen.model = tiny_transformer(fit.vocab.size());
    frozen.train.task_mode = TaskMode::na;
    frozen.train.learning_rate = 0.0;
    frozen.train.epochs = 4;
    frozen.train.batch_size = 4;
    frozen.train.seed = 5;
    GridEntry learner = frozen;
    learner.name = "small-lr";
    learner.train.learning_rate = 5e-3;
    GridEntry broken = frozen;
    broken.name = "lora-on-recurrent";
    broken.model.backbone.kind = BackboneKind::recurrent;
    broken.peft = PeftKind::lora;
    broken.lora.rank = 2;
    broken.lora.alpha = 4.0;

    const std::string path = temp_path("grid_rank.csv");
    std::filesystem::remove(path);
    const auto results = grid_search({frozen, learner, broken}, fit.traces, val.traces, path);
    REQUIRE(results.size() == 3);
    CHECK(results[0].name == "small-lr");
    CHECK(results[1].name == "zero-lr");
    CHECK(results[2].name == "lora-on-recurrent");
    CHECK(results[2].status.rfind("failed: ", 0) == 0);
    CHECK(std::isnan(results[2].val_loss));
    CHECK(results[0].params.find("lr=") != std::string::npos);
    std::filesystem::remove(path);

    CHECK_THROWS_AS(grid_search({}, fit.traces, val.traces, path), ConfigError);
    CHECK_THROWS_AS(grid_search({frozen, frozen}, fit.traces, val.traces, path), ConfigError);
}

TEST_CASE("a resumed grid reuses completed rows verbatim") {
    const EventLog log = alternating_log(8);
    const auto [fit_log, val_log] = split_validation(log, 0.25);
    const EncodedLog fit = encode_log(fit_log);
    const EncodedLog val = encode_log(val_log, &fit.vocab, &fit.stats);

    auto entry = [&](const std::string& name, uint64_t seed) {
        GridEntry e;
        e.name = name;
        e.model = tiny_transformer(fit.vocab.size());
        e.train.task_mode = TaskMode::na;
        e.train.learning_rate = 5e-3;
        e.train.epochs = 2;
        e.train.batch_size = 4;
        e.train.seed = seed;
        return e;
    };

    const std::string path = temp_path("grid_resume.csv");
    std::filesystem::remove(path);
    grid_search({entry("first", 1), entry("second", 2)}, fit.traces, val.traces, path);
    std::ifstream in1(path);
    std::vector<std::string> lines1;
    for (std::string l; std::getline(in1, l);) lines1.push_back(l);
    in1.close();
    REQUIRE(lines1.size() == 3);

    const auto results = grid_search({entry("first", 1), entry("second", 2), entry("third", 3)},
                                     fit.traces, val.traces, path);
    CHECK(results.size() == 3);
    std::ifstream in2(path);
    std::vector<std::string> lines2;
    for (std::string l; std::getline(in2, l);) lines2.push_back(l);
    in2.close();
    REQUIRE(lines2.size() == 4);
    CHECK(lines2[0] == lines1[0]);
    CHECK(lines2[1] == lines1[1]);
    CHECK(lines2[2] == lines1[2]);

    const auto imported = import_grid_results(path);
    REQUIRE(imported.size() == 3);
    for (const auto& r : imported) {
        bool found = false;
        for (const auto& s : results)
            if (s.name == r.name) {
                found = true;
                CHECK(metric_eq(s.val_loss, r.val_loss));
                CHECK(metric_eq(s.na_acc, r.na_acc));
                CHECK(metric_eq(s.rt_mse, r.rt_mse));
                CHECK(s.status == r.status);
                CHECK(s.params == r.params);
            }
        CHECK(found);
    }
    std::filesystem::remove(path);
}
