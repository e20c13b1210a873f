#include "ppm/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ppm/csv.hpp"

namespace ppm {

using nlohmann::json;

namespace {

json parse_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config is not valid JSON");
    return j;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void get_to(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception&) {
        throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
    }
}

void parse_data(const json& j, DataConfig& out) {
    check_keys(j, "data", {"csv_path", "grammar_path", "n_cases", "test_fraction"});
    get_to(j, "csv_path", out.csv_path, "data");
    get_to(j, "grammar_path", out.grammar_path, "data");
    get_to(j, "n_cases", out.n_cases, "data");
    get_to(j, "test_fraction", out.test_fraction, "data");
    const bool csv = !out.csv_path.empty(), grammar = !out.grammar_path.empty();
    if (csv == grammar)
        throw ConfigError("data needs exactly one source: csv_path or grammar_path");
    if (grammar && out.n_cases < 1)
        throw ConfigError("a grammar data source needs n_cases >= 1");
    if (csv && j.contains("n_cases"))
        throw ConfigError("n_cases only applies to a grammar data source");
}

void parse_model(const json& j, ModelConfig& out, bool* heads_given = nullptr) {
    check_keys(j, "model", {"input", "backbone", "heads"});
    if (heads_given) *heads_given = j.contains("heads");
    if (j.contains("input")) {
        const json& in = j.at("input");
        check_keys(in, "model.input", {"vocab_size", "embed_dim", "proj_dim", "fusion"});
        get_to(in, "vocab_size", out.input.vocab_size, "model.input");
        get_to(in, "embed_dim", out.input.embed_dim, "model.input");
        get_to(in, "proj_dim", out.input.proj_dim, "model.input");
        if (in.contains("fusion")) {
            const std::string f = in.at("fusion").get<std::string>();
            if (f == "sum") out.input.fusion = Fusion::sum;
            else if (f == "concat") out.input.fusion = Fusion::concat;
            else throw ConfigError("fusion must be sum or concat");
        }
    }
    if (j.contains("backbone")) {
        const json& b = j.at("backbone");
        check_keys(b, "model.backbone",
                   {"kind", "n_blocks", "model_dim", "n_heads", "ff_multiplier", "max_seq_len",
                    "dropout"});
        if (b.contains("kind")) {
            const std::string k = b.at("kind").get<std::string>();
            if (k == "transformer") out.backbone.kind = BackboneKind::transformer;
            else if (k == "recurrent") out.backbone.kind = BackboneKind::recurrent;
            else throw ConfigError("backbone kind must be transformer or recurrent");
        }
        get_to(b, "n_blocks", out.backbone.n_blocks, "model.backbone");
        get_to(b, "model_dim", out.backbone.model_dim, "model.backbone");
        get_to(b, "n_heads", out.backbone.n_heads, "model.backbone");
        get_to(b, "ff_multiplier", out.backbone.ff_multiplier, "model.backbone");
        get_to(b, "max_seq_len", out.backbone.max_seq_len, "model.backbone");
        get_to(b, "dropout", out.backbone.dropout, "model.backbone");
    }
    if (j.contains("heads")) {
        const json& h = j.at("heads");
        check_keys(h, "model.heads", {"na", "rt"});
        get_to(h, "na", out.heads.na, "model.heads");
        get_to(h, "rt", out.heads.rt, "model.heads");
    }
}

void parse_peft(const json& j, RunConfig& out) {
    out.has_peft_section = true;
    check_keys(j, "peft",
               {"kind", "mode", "layers", "rank", "alpha", "targets", "init_std"});
    if (!j.contains("kind")) throw ConfigError("peft needs a kind: none, freeze, or lora");
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "none") {
        out.peft = PeftKind::none;
        check_keys(j, "peft", {"kind"});
    } else if (kind == "freeze") {
        out.peft = PeftKind::freeze;
        check_keys(j, "peft", {"kind", "mode", "layers"});
        std::string mode = "full";
        get_to(j, "mode", mode, "peft");
        if (mode == "full") out.freeze.mode = FreezeMode::full;
        else if (mode == "partial") out.freeze.mode = FreezeMode::partial;
        else throw ConfigError("freeze mode must be full or partial");
        get_to(j, "layers", out.freeze.layer_indices, "peft");
        if (out.freeze.mode == FreezeMode::full && !out.freeze.layer_indices.empty())
            throw ConfigError("freeze layers only apply to partial mode");
    } else if (kind == "lora") {
        out.peft = PeftKind::lora;
        check_keys(j, "peft", {"kind", "rank", "alpha", "targets", "init_std"});
        get_to(j, "rank", out.lora.rank, "peft");
        get_to(j, "alpha", out.lora.alpha, "peft");
        get_to(j, "targets", out.lora.targets, "peft");
        get_to(j, "init_std", out.lora.init_std, "peft");
        if (out.lora.alpha == 0.0) out.lora.alpha = static_cast<double>(out.lora.rank);
    } else {
        throw ConfigError("peft kind must be none, freeze, or lora");
    }
}

void parse_train(const json& j, TrainConfig& out) {
    check_keys(j, "train",
               {"task_mode", "learning_rate", "batch_size", "epochs", "w_na", "w_rt", "seed",
                "clip_norm", "val_fraction"});
    if (j.contains("task_mode")) out.task_mode = task_mode_from_name(j.at("task_mode").get<std::string>());
    get_to(j, "learning_rate", out.learning_rate, "train");
    get_to(j, "batch_size", out.batch_size, "train");
    get_to(j, "epochs", out.epochs, "train");
    get_to(j, "w_na", out.w_na, "train");
    get_to(j, "w_rt", out.w_rt, "train");
    get_to(j, "seed", out.seed, "train");
    get_to(j, "clip_norm", out.clip_norm, "train");
    get_to(j, "val_fraction", out.val_fraction, "train");
}

// Without an explicit heads section, the model gets exactly the heads the
// configured task mode needs.
void default_heads(ModelConfig& model, TaskMode mode) {
    model.heads.na = mode != TaskMode::rt;
    model.heads.rt = mode != TaskMode::na;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    const json j = parse_json(json_text);
    check_keys(j, "config", {"data", "model", "peft", "train", "output"});
    RunConfig cfg;
    bool heads_given = false;
    if (!j.contains("data")) throw ConfigError("config needs a data section");
    parse_data(j.at("data"), cfg.data);
    if (j.contains("model")) parse_model(j.at("model"), cfg.model, &heads_given);
    if (j.contains("peft")) parse_peft(j.at("peft"), cfg);
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    if (!heads_given) default_heads(cfg.model, cfg.train.task_mode);
    if (j.contains("output")) {
        check_keys(j.at("output"), "output", {"directory"});
        get_to(j.at("output"), "directory", cfg.out_dir, "output");
    }
    if (cfg.out_dir.empty()) throw ConfigError("config needs output.directory");
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    try {
        return parse_run_config(read_file(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    json data;
    if (!cfg.data.csv_path.empty()) data["csv_path"] = cfg.data.csv_path;
    if (!cfg.data.grammar_path.empty()) {
        data["grammar_path"] = cfg.data.grammar_path;
        data["n_cases"] = cfg.data.n_cases;
    }
    data["test_fraction"] = cfg.data.test_fraction;
    j["data"] = data;
    j["model"] = {
        {"input",
         {{"vocab_size", cfg.model.input.vocab_size},
          {"embed_dim", cfg.model.input.embed_dim},
          {"proj_dim", cfg.model.input.proj_dim},
          {"fusion", cfg.model.input.fusion == Fusion::sum ? "sum" : "concat"}}},
        {"backbone",
         {{"kind", cfg.model.backbone.kind == BackboneKind::transformer ? "transformer"
                                                                        : "recurrent"},
          {"n_blocks", cfg.model.backbone.n_blocks},
          {"model_dim", cfg.model.backbone.model_dim},
          {"n_heads", cfg.model.backbone.n_heads},
          {"ff_multiplier", cfg.model.backbone.ff_multiplier},
          {"max_seq_len", cfg.model.backbone.max_seq_len},
          {"dropout", cfg.model.backbone.dropout}}},
        {"heads", {{"na", cfg.model.heads.na}, {"rt", cfg.model.heads.rt}}}};
    switch (cfg.peft) {
        case PeftKind::none: j["peft"] = {{"kind", "none"}}; break;
        case PeftKind::freeze:
            j["peft"] = {{"kind", "freeze"},
                         {"mode", cfg.freeze.mode == FreezeMode::full ? "full" : "partial"}};
            if (cfg.freeze.mode == FreezeMode::partial)
                j["peft"]["layers"] = cfg.freeze.layer_indices;
            break;
        case PeftKind::lora:
            j["peft"] = {{"kind", "lora"},
                         {"rank", cfg.lora.rank},
                         {"alpha", cfg.lora.alpha},
                         {"targets", cfg.lora.targets},
                         {"init_std", cfg.lora.init_std}};
            break;
    }
    j["train"] = {{"task_mode", task_mode_name(cfg.train.task_mode)},
                  {"learning_rate", cfg.train.learning_rate},
                  {"batch_size", cfg.train.batch_size},
                  {"epochs", cfg.train.epochs},
                  {"w_na", cfg.train.w_na},
                  {"w_rt", cfg.train.w_rt},
                  {"seed", cfg.train.seed},
                  {"clip_norm", cfg.train.clip_norm},
                  {"val_fraction", cfg.train.val_fraction}};
    j["output"] = {{"directory", cfg.out_dir}};
    return j.dump(2) + "\n";
}

std::vector<GridEntry> parse_grid_space(const std::string& json_text) {
    const json j = parse_json(json_text);
    check_keys(j, "space", {"entries"});
    if (!j.contains("entries") || !j.at("entries").is_array() || j.at("entries").empty())
        throw ConfigError("grid space needs a non-empty entries array");
    std::vector<GridEntry> entries;
    for (const json& ej : j.at("entries")) {
        check_keys(ej, "entry", {"name", "model", "train", "peft"});
        GridEntry e;
        bool heads_given = false;
        if (!ej.contains("name")) throw ConfigError("every grid entry needs a name");
        e.name = ej.at("name").get<std::string>();
        if (ej.contains("model")) parse_model(ej.at("model"), e.model, &heads_given);
        if (ej.contains("train")) parse_train(ej.at("train"), e.train);
        if (!heads_given) default_heads(e.model, e.train.task_mode);
        if (ej.contains("peft")) {
            RunConfig tmp;
            parse_peft(ej.at("peft"), tmp);
            e.peft = tmp.peft;
            e.freeze = tmp.freeze;
            e.lora = tmp.lora;
        }
        entries.push_back(e);
    }
    return entries;
}

std::vector<GridEntry> load_grid_space(const std::string& path) {
    try {
        return parse_grid_space(read_file(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void save_vocab(const Vocab& vocab, const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    for (int i = 0; i < vocab.size(); ++i)
        rows.push_back({std::to_string(i), vocab.index_to_label[i]});
    csv_write_file(path, {"id", "label"}, rows);
}

Vocab load_vocab(const std::string& path) {
    const CsvTable t = csv_read_file(path);
    if (t.header != std::vector<std::string>{"id", "label"})
        throw DataError(path + ": unexpected vocab header");
    Vocab v;
    for (size_t i = 0; i < t.rows.size(); ++i) {
        if (std::to_string(i) != t.rows[i][0])
            throw DataError(path + ": vocab ids must be dense from 0");
        v.index_to_label.push_back(t.rows[i][1]);
        v.label_to_index[t.rows[i][1]] = static_cast<int>(i);
    }
    if (v.size() < 3) throw DataError(path + ": vocab is missing the special tokens");
    return v;
}

namespace {

std::string stat_cell(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_feature_stats(const FeatureStats& stats, const std::string& path) {
    csv_write_file(path, {"feature", "mean", "stddev"},
                   {{"dt_prev", stat_cell(stats.dt_prev.mean), stat_cell(stats.dt_prev.stddev)},
                    {"dt_start", stat_cell(stats.dt_start.mean), stat_cell(stats.dt_start.stddev)},
                    {"remaining", stat_cell(stats.rt.mean), stat_cell(stats.rt.stddev)}});
}

FeatureStats load_feature_stats(const std::string& path) {
    const CsvTable t = csv_read_file(path);
    if (t.header != std::vector<std::string>{"feature", "mean", "stddev"})
        throw DataError(path + ": unexpected stats header");
    FeatureStats s;
    s.fitted_on = "train";
    bool seen[3] = {false, false, false};
    for (const auto& row : t.rows) {
        StatEntry e{std::strtod(row[1].c_str(), nullptr), std::strtod(row[2].c_str(), nullptr)};
        if (row[0] == "dt_prev") s.dt_prev = e, seen[0] = true;
        else if (row[0] == "dt_start") s.dt_start = e, seen[1] = true;
        else if (row[0] == "remaining") s.rt = e, seen[2] = true;
        else throw DataError(path + ": unknown feature '" + row[0] + "'");
    }
    if (!(seen[0] && seen[1] && seen[2])) throw DataError(path + ": incomplete feature stats");
    return s;
}

void save_split_manifest(const SplitResult& split, const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& c : split.train.cases) rows.push_back({c.id, "train"});
    for (const auto& c : split.test.cases) rows.push_back({c.id, "test"});
    for (const auto& id : split.dropped) rows.push_back({id, "dropped"});
    csv_write_file(path, {"case_id", "partition"}, rows);
}

}  // namespace ppm
