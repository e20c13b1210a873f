#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ppm/encoding.hpp"
#include "ppm/event_log.hpp"
#include "ppm/model.hpp"
#include "ppm/peft.hpp"
#include "ppm/run_config.hpp"
#include "ppm/synthetic.hpp"
#include "ppm/training.hpp"

namespace fs = std::filesystem;
using namespace ppm;

namespace {

long long event_count(const EventLog& log) {
    long long n = 0;
    for (const auto& c : log.cases) n += static_cast<long long>(c.events.size());
    return n;
}

std::vector<EncodedTrace> encode_cases(const EventLog& log, const Vocab& vocab,
                                       const FeatureStats& stats) {
    std::vector<EncodedTrace> traces;
    for (const auto& c : log.cases) traces.push_back(encode_trace(c, vocab, stats));
    return traces;
}

struct PreparedData {
    std::vector<EncodedTrace> fit, val;
    Vocab vocab;
    FeatureStats stats;
    size_t n_fit = 0, n_val = 0, n_test = 0, n_dropped = 0;
};

// Loads or generates the source log, splits off the held-out test cases, then
// the validation tail, and fits vocabulary and statistics on what remains.
// Resolves a vocab_size of 0 in the config to the fitted vocabulary's size.
PreparedData prepare_data(RunConfig& cfg) {
    EventLog source;
    if (!cfg.data.csv_path.empty()) {
        source = load_csv(cfg.data.csv_path);
    } else {
        const ProcessGrammar g = load_grammar(cfg.data.grammar_path);
        source = generate_log(g, cfg.data.n_cases, derive_seed(cfg.train.seed, 0x6E6));
    }
    source = filter_short_cases(source);

    EventLog train_part;
    size_t n_test = 0, n_dropped = 0;
    if (cfg.data.test_fraction == 0.0) {
        train_part = source;
    } else {
        SplitResult split = unbiased_split(source, cfg.data.test_fraction);
        n_test = split.test.cases.size();
        n_dropped = split.dropped.size();
        train_part = std::move(split.train);
    }
    auto [fit_log, val_log] = split_validation(train_part, cfg.train.val_fraction);

    PreparedData d;
    d.vocab = build_vocab(fit_log);
    d.stats = fit_feature_stats(fit_log);
    if (cfg.model.input.vocab_size == 0) {
        cfg.model.input.vocab_size = d.vocab.size();
    } else if (cfg.model.input.vocab_size != d.vocab.size()) {
        throw ConfigError("config vocab_size " + std::to_string(cfg.model.input.vocab_size) +
                          " does not match the fitted vocabulary (" +
                          std::to_string(d.vocab.size()) + ")");
    }
    d.fit = encode_cases(fit_log, d.vocab, d.stats);
    d.val = encode_cases(val_log, d.vocab, d.stats);
    d.n_fit = fit_log.cases.size();
    d.n_val = val_log.cases.size();
    d.n_test = n_test;
    d.n_dropped = n_dropped;
    return d;
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

void write_text_file(const std::string& text, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
}

void print_metric(const char* name, double v) {
    if (!std::isnan(v)) std::printf("%s: %.6f\n", name, v);
}

// Persists everything needed to reproduce and later evaluate the run: the
// resolved config (including seed and derived vocab size), the checkpoint,
// the learning curves, and the vocabulary/statistics the data was encoded
// with.
void write_run_outputs(const RunConfig& cfg, const Model& model, const TrainReport& report,
                       const PreparedData& d) {
    fs::create_directories(cfg.out_dir);
    write_text_file(run_config_to_json(cfg), cfg.out_dir + "/config.json");
    save_checkpoint(model.registry(), cfg.out_dir + "/model.ckpt");
    export_curves(report, cfg.out_dir + "/curves.csv");
    save_vocab(d.vocab, cfg.out_dir + "/vocab.csv");
    save_feature_stats(d.stats, cfg.out_dir + "/stats.csv");
}

void print_run_summary(const RunConfig& cfg, const TrainReport& report, const PreparedData& d) {
    std::printf("cases: %zu train, %zu val, %zu test, %zu dropped\n", d.n_fit, d.n_val, d.n_test,
                d.n_dropped);
    for (auto it = report.rows.rbegin(); it != report.rows.rend(); ++it)
        if (it->split == (d.n_val ? "val" : "train")) {
            std::printf("final %s:", it->split.c_str());
            if (!std::isnan(it->na_loss)) std::printf(" na_loss %.4f na_acc %.4f", it->na_loss, it->na_acc);
            if (!std::isnan(it->rt_loss)) std::printf(" rt_mse %.4f", it->rt_mse);
            std::printf("\n");
            break;
        }
    std::printf("best epoch: %d\n", report.best_epoch);
    std::printf("params: %lld trainable of %lld\n",
                static_cast<long long>(report.trainable_params),
                static_cast<long long>(report.total_params));
    std::printf("saved: %s\n", cfg.out_dir.c_str());
}

void cmd_preprocess(const std::string& log_path, const std::string& out_dir,
                    double test_fraction) {
    const EventLog raw = load_csv(log_path);
    const EventLog filtered = filter_short_cases(raw);
    SplitResult split = unbiased_split(filtered, test_fraction);
    const Vocab vocab = build_vocab(split.train);
    const FeatureStats stats = fit_feature_stats(split.train);

    fs::create_directories(out_dir);
    save_split_manifest(split, out_dir + "/manifest.csv");
    save_csv(split.train, out_dir + "/train.csv");
    save_csv(split.test, out_dir + "/test.csv");
    save_vocab(vocab, out_dir + "/vocab.csv");
    save_feature_stats(stats, out_dir + "/stats.csv");

    nlohmann::json summary = {
        {"cases", raw.cases.size()},
        {"events", event_count(raw)},
        {"activities", raw.activity_set.size()},
        {"filtered_cases", filtered.cases.size()},
        {"filtered_events", event_count(filtered)},
        {"train_cases", split.train.cases.size()},
        {"test_cases", split.test.cases.size()},
        {"dropped_cases", split.dropped.size()},
        {"tau", split.tau},
    };
    write_json_file(summary, out_dir + "/summary.json");
    write_json_file({{"log", log_path}, {"test_fraction", test_fraction}},
                    out_dir + "/config.json");

    std::printf("cases: %zu\nevents: %lld\nactivities: %zu\n", raw.cases.size(),
                event_count(raw), raw.activity_set.size());
    std::printf("note: counts describe the raw log; cases with fewer than 2 events (%zu here) "
                "are removed before splitting, so published corpus statistics may match either "
                "the raw or the filtered numbers\n",
                raw.cases.size() - filtered.cases.size());
    std::printf("filtered: %zu cases, %lld events\n", filtered.cases.size(),
                event_count(filtered));
    std::printf("split: %zu train, %zu test, %zu dropped (tau %.0f)\n",
                split.train.cases.size(), split.test.cases.size(), split.dropped.size(),
                split.tau);
    std::printf("saved: %s\n", out_dir.c_str());
}

void run_from_scratch(const std::string& config_path, const char* command) {
    RunConfig cfg = load_run_config(config_path);
    if (cfg.peft != PeftKind::none)
        throw ConfigError(std::string(command) + " trains from scratch; peft must be none");
    PreparedData d = prepare_data(cfg);
    validate_train_config(cfg.train, cfg.model);
    Model model = Model::init(cfg.model, cfg.train.seed);
    const TrainReport report = train(model, d.fit, d.val, cfg.train);
    write_run_outputs(cfg, model, report, d);
    print_run_summary(cfg, report, d);
}

// Structural backbone settings always come from the pretrained checkpoint;
// the fine-tune config may only restate them identically (dropout may vary).
BackboneConfig resolve_finetune_backbone(const BackboneConfig& requested,
                                         const BackboneConfig& source) {
    if (requested.model_dim != 0 || requested.n_blocks != 0) {
        if (requested.kind != source.kind || requested.n_blocks != source.n_blocks ||
            requested.model_dim != source.model_dim || requested.n_heads != source.n_heads ||
            requested.ff_multiplier != source.ff_multiplier ||
            requested.max_seq_len != source.max_seq_len)
            throw ConfigError("backbone structure comes from the pretrained checkpoint");
    }
    BackboneConfig out = source;
    out.dropout = requested.dropout;
    return out;
}

void cmd_finetune(const std::string& config_path, const std::string& backbone_path) {
    RunConfig cfg = load_run_config(config_path);
    if (!cfg.has_peft_section || cfg.peft == PeftKind::none)
        throw ConfigError("finetune needs a peft section (freeze or lora)");

    if (!fs::exists(backbone_path)) throw IoError("cannot read " + backbone_path);
    const fs::path src_dir = fs::path(backbone_path).parent_path();
    RunConfig src_cfg = load_run_config((src_dir / "config.json").string());
    Model source = Model::init(src_cfg.model, 0);
    if (src_cfg.peft == PeftKind::lora) apply_lora(source, src_cfg.lora, 0);
    source.load_values(load_checkpoint(backbone_path));
    if (source.lora()) source = merge_lora(source);

    cfg.model.backbone = resolve_finetune_backbone(cfg.model.backbone, src_cfg.model.backbone);
    if (cfg.model.input.embed_dim == 0) {
        cfg.model.input.embed_dim = src_cfg.model.input.embed_dim;
        cfg.model.input.proj_dim = src_cfg.model.input.proj_dim;
        cfg.model.input.fusion = src_cfg.model.input.fusion;
    }
    PreparedData d = prepare_data(cfg);
    validate_train_config(cfg.train, cfg.model);

    Model model = transplant_backbone(source, cfg.model.input, cfg.model.heads,
                                      derive_seed(cfg.train.seed, 0x10));
    if (cfg.peft == PeftKind::freeze) apply_freeze(model, cfg.freeze);
    if (cfg.peft == PeftKind::lora)
        apply_lora(model, cfg.lora, derive_seed(cfg.train.seed, 0xA0A));

    const ParamCounts pc = count_params(model);
    std::printf("trainable: %lld/%lld (%.1f%%)\n", static_cast<long long>(pc.trainable),
                static_cast<long long>(pc.total), pc.trainable_pct());

    const TrainReport report = train(model, d.fit, d.val, cfg.train);
    write_run_outputs(cfg, model, report, d);
    print_run_summary(cfg, report, d);
}

void cmd_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                  std::string out_path) {
    if (!fs::exists(ckpt_path)) throw IoError("cannot read " + ckpt_path);
    const fs::path dir = fs::path(ckpt_path).parent_path();
    const RunConfig cfg = load_run_config((dir / "config.json").string());
    const Vocab vocab = load_vocab((dir / "vocab.csv").string());
    const FeatureStats stats = load_feature_stats((dir / "stats.csv").string());

    Model model = Model::init(cfg.model, 0);
    if (cfg.peft == PeftKind::lora) apply_lora(model, cfg.lora, 0);
    model.load_values(load_checkpoint(ckpt_path));

    const EventLog test = filter_short_cases(load_csv(data_dir + "/test.csv"));
    if (test.cases.empty()) throw DataError(data_dir + "/test.csv has no usable cases");
    const EvalResult r = evaluate(model, encode_cases(test, vocab, stats), cfg.train);

    std::printf("task_mode: %s\n", task_mode_name(cfg.train.task_mode).c_str());
    std::printf("cases: %zu\npositions: %lld\n", test.cases.size(), r.positions);
    print_metric("na_loss", r.na_loss);
    print_metric("na_acc", r.na_acc);
    print_metric("na_acc_no_eos", r.na_acc_no_eos);
    print_metric("rt_mse", r.rt_mse);
    if (!std::isnan(r.rt_mse)) std::printf("rt_mse units: normalized (z-scored seconds)\n");

    nlohmann::json j = {{"task_mode", task_mode_name(cfg.train.task_mode)},
                        {"cases", test.cases.size()},
                        {"positions", r.positions}};
    if (!std::isnan(r.na_loss)) {
        j["na_loss"] = r.na_loss;
        j["na_acc"] = r.na_acc;
        j["na_acc_no_eos"] = r.na_acc_no_eos;
    }
    if (!std::isnan(r.rt_mse)) {
        j["rt_mse"] = r.rt_mse;
        j["rt_mse_units"] = "normalized";
    }
    if (out_path.empty()) out_path = (dir / "metrics.json").string();
    write_json_file(j, out_path);
}

void cmd_grid(const std::string& space_path, const std::string& data_dir,
              const std::string& out_dir, int jobs) {
    if (jobs < 1) throw ConfigError("--jobs must be >= 1");
    std::vector<GridEntry> entries = load_grid_space(space_path);
    const double vf = entries.front().train.val_fraction;
    for (const auto& e : entries)
        if (e.train.val_fraction != vf)
            throw ConfigError("all grid entries must share val_fraction");

    const EventLog train_log = load_csv(data_dir + "/train.csv");
    const Vocab vocab = load_vocab(data_dir + "/vocab.csv");
    const FeatureStats stats = load_feature_stats(data_dir + "/stats.csv");
    const auto [fit_log, val_log] = split_validation(train_log, vf);
    const auto fit = encode_cases(fit_log, vocab, stats);
    const auto val = encode_cases(val_log, vocab, stats);
    for (auto& e : entries)
        if (e.model.input.vocab_size == 0) e.model.input.vocab_size = vocab.size();

    fs::create_directories(out_dir);
    fs::copy_file(space_path, out_dir + "/space.json", fs::copy_options::overwrite_existing);
    const auto results = grid_search(entries, fit, val, out_dir + "/results.csv");

    for (size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        if (r.status == "ok")
            std::printf("%2zu. %s val_loss %.6f\n", i + 1, r.name.c_str(), r.val_loss);
        else
            std::printf("%2zu. %s %s\n", i + 1, r.name.c_str(), r.status.c_str());
    }
    std::printf("saved: %s/results.csv\n", out_dir.c_str());
}

void cmd_gen_synthetic(const std::string& grammar_path, int n_cases, uint64_t seed,
                       const std::string& out_csv) {
    const ProcessGrammar g = load_grammar(grammar_path);
    const EventLog log = generate_log(g, n_cases, seed);
    if (const fs::path parent = fs::path(out_csv).parent_path(); !parent.empty())
        fs::create_directories(parent);
    save_csv(log, out_csv);
    std::printf("cases: %zu\nevents: %lld\nactivities: %zu\nsaved: %s\n", log.cases.size(),
                event_count(log), log.activity_set.size(), out_csv.c_str());
}

void cmd_export_curves(const std::string& report_csv, const std::string& out_csv) {
    TrainReport report;
    report.rows = import_curves(report_csv);
    if (report.rows.empty()) throw DataError(report_csv + " has no curve rows");
    export_curves(report, out_csv);
    std::printf("rows: %zu\nsaved: %s\n", report.rows.size(), out_csv.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Process-prediction models: preprocessing, training, adaptation, evaluation"};
    app.require_subcommand(1);

    std::string log_path, out_dir, config_path, backbone_path, ckpt_path, data_dir;
    std::string space_path, grammar_path, report_csv, out_csv, metrics_out;
    double test_fraction = 0.2;
    int n_cases = 0, jobs = 1;
    uint64_t seed = 0;

    auto* pre = app.add_subcommand("preprocess",
                                   "Split an event log and fit vocabulary and statistics");
    pre->add_option("--log", log_path, "event-log CSV")->required();
    pre->add_option("--out", out_dir, "output directory")->required();
    pre->add_option("--test-fraction", test_fraction, "held-out share of case starts");

    auto* pt = app.add_subcommand("pretrain", "Train a model from scratch as a transfer source");
    pt->add_option("--config", config_path, "run config JSON")->required();

    auto* ft = app.add_subcommand("finetune",
                                  "Adapt a pretrained backbone with fresh input/output layers");
    ft->add_option("--config", config_path, "run config JSON with a peft section")->required();
    ft->add_option("--backbone", backbone_path, "pretrained checkpoint")->required();

    auto* tb = app.add_subcommand("train-baseline", "Train a from-scratch baseline");
    tb->add_option("--config", config_path, "run config JSON")->required();

    auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on held-out data");
    ev->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    ev->add_option("--data", data_dir, "preprocessed data directory")->required();
    ev->add_option("--out", metrics_out, "metrics JSON path (default: next to checkpoint)");

    auto* gr = app.add_subcommand("grid", "Run a hyperparameter grid with resume");
    gr->add_option("--space", space_path, "grid space JSON")->required();
    gr->add_option("--data", data_dir, "preprocessed data directory")->required();
    gr->add_option("--out", out_dir, "output directory")->required();
    gr->add_option("--jobs", jobs, "worker slots (runs are executed sequentially)");

    auto* gs = app.add_subcommand("gen-synthetic", "Generate an event log from a grammar");
    gs->add_option("--grammar", grammar_path, "grammar file")->required();
    gs->add_option("--cases", n_cases, "number of cases")->required();
    gs->add_option("--seed", seed, "generation seed");
    gs->add_option("--out", out_csv, "output CSV")->required();

    auto* ec = app.add_subcommand("export-curves", "Re-emit a learning-curve CSV");
    ec->add_option("--report", report_csv, "curve CSV produced by a training run")->required();
    ec->add_option("--out", out_csv, "destination CSV")->required();

    try {
        app.parse(argc, argv);
        if (*pre) cmd_preprocess(log_path, out_dir, test_fraction);
        else if (*pt) run_from_scratch(config_path, "pretrain");
        else if (*ft) cmd_finetune(config_path, backbone_path);
        else if (*tb) run_from_scratch(config_path, "train-baseline");
        else if (*ev) cmd_evaluate(ckpt_path, data_dir, metrics_out);
        else if (*gr) cmd_grid(space_path, data_dir, out_dir, jobs);
        else if (*gs) cmd_gen_synthetic(grammar_path, n_cases, seed, out_csv);
        else if (*ec) cmd_export_curves(report_csv, out_csv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 0;
}
