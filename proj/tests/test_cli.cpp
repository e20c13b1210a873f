#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ppm/csv.hpp"
#include "ppm/event_log.hpp"
#include "ppm/run_config.hpp"
#include "ppm/training.hpp"

using namespace ppm;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "ppm_cli_suite";

std::string wpath(const std::string& rel) { return (kWork / rel).string(); }

int run_cli(const std::string& args, std::string* output = nullptr) {
    const std::string out_file = wpath("last_output.txt");
    const std::string cmd = std::string(PPM_BIN) + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (output) {
        std::ifstream in(out_file);
        std::ostringstream buf;
        buf << in.rdbuf();
        *output = buf.str();
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// Curve rows with the wall-clock column cleared, for comparisons that must
// ignore timing.
std::string curves_without_seconds(const std::string& path) {
    const CsvTable t = csv_read_file(path);
    std::ostringstream out;
    for (const auto& row : t.rows) {
        for (size_t i = 0; i + 1 < row.size(); ++i) out << row[i] << '|';
        out << '\n';
    }
    return out.str();
}

std::string grammar(const std::string& name) {
    return std::string(PPM_SOURCE_DIR) + "/data/grammars/" + name;
}

const char* kBaseConfig = R"({
  "data": {"csv_path": "%LOG%", "test_fraction": 0.2},
  "model": {
    "input": {"embed_dim": 16, "proj_dim": 16, "fusion": "sum"},
    "backbone": {"kind": "transformer", "n_blocks": 2, "model_dim": 16, "n_heads": 2, "dropout": 0.0},
    "heads": {"na": true, "rt": true}
  },
  "train": {"task_mode": "multi", "learning_rate": 0.005, "batch_size": 16, "epochs": 3, "seed": 11},
  "output": {"directory": "%OUT%"}
})";

std::string config_text(const std::string& log, const std::string& out) {
    std::string text = kBaseConfig;
    text.replace(text.find("%LOG%"), 5, log);
    text.replace(text.find("%OUT%"), 5, out);
    return text;
}

}  // namespace

TEST_CASE("synthetic generation and preprocessing produce a complete data directory") {
    fs::remove_all(kWork);
    fs::create_directories(kWork);

    std::string out;
    CHECK(run_cli("gen-synthetic --grammar " + grammar("g1.grammar") + " --cases 150 --seed 5 --out " +
                      wpath("log.csv"),
                  &out) == 0);
    CHECK(out.find("cases: 150") != std::string::npos);

    CHECK(run_cli("preprocess --log " + wpath("log.csv") + " --out " + wpath("prep"), &out) == 0);
    CHECK(out.find("cases: 150") != std::string::npos);
    CHECK(out.find("events: ") != std::string::npos);
    CHECK(out.find("activities: 8") != std::string::npos);
    CHECK(out.find("note: ") != std::string::npos);

    for (const char* f : {"manifest.csv", "train.csv", "test.csv", "vocab.csv", "stats.csv",
                          "summary.json", "config.json"})
        CHECK(fs::exists(kWork / "prep" / f));

    const CsvTable manifest = csv_read_file(wpath("prep/manifest.csv"));
    CHECK(manifest.header == std::vector<std::string>{"case_id", "partition"});
    CHECK(manifest.rows.size() == 150);
    size_t trains = 0, tests = 0, dropped = 0;
    for (const auto& r : manifest.rows) {
        if (r[1] == "train") ++trains;
        else if (r[1] == "test") ++tests;
        else if (r[1] == "dropped") ++dropped;
        else FAIL("unexpected partition ", r[1]);
    }
    const nlohmann::json summary = nlohmann::json::parse(slurp(wpath("prep/summary.json")));
    CHECK(summary.at("train_cases").get<size_t>() == trains);
    CHECK(summary.at("test_cases").get<size_t>() == tests);
    CHECK(summary.at("dropped_cases").get<size_t>() == dropped);
    CHECK(load_csv(wpath("prep/train.csv")).cases.size() == trains);
    CHECK(load_csv(wpath("prep/test.csv")).cases.size() == tests);
    CHECK(load_vocab(wpath("prep/vocab.csv")).size() == 11);
}

TEST_CASE("training runs are byte-reproducible apart from wall-clock columns") {
    write_file(wpath("run_a.json"), config_text(wpath("log.csv"), wpath("run_a")));
    write_file(wpath("run_b.json"), config_text(wpath("log.csv"), wpath("run_b")));

    std::string out;
    REQUIRE(run_cli("train-baseline --config " + wpath("run_a.json"), &out) == 0);
    CHECK(out.find("saved: ") != std::string::npos);
    REQUIRE(run_cli("train-baseline --config " + wpath("run_b.json"), &out) == 0);

    for (const char* f : {"config.json", "model.ckpt", "curves.csv", "vocab.csv", "stats.csv"})
        CHECK(fs::exists(kWork / "run_a" / f));
    CHECK(slurp(wpath("run_a/model.ckpt")) == slurp(wpath("run_b/model.ckpt")));
    CHECK(slurp(wpath("run_a/vocab.csv")) == slurp(wpath("run_b/vocab.csv")));
    CHECK(slurp(wpath("run_a/stats.csv")) == slurp(wpath("run_b/stats.csv")));
    CHECK(curves_without_seconds(wpath("run_a/curves.csv")) ==
          curves_without_seconds(wpath("run_b/curves.csv")));
    CHECK(slurp(wpath("run_a/config.json")) != slurp(wpath("run_b/config.json")));

    const RunConfig resolved = load_run_config(wpath("run_a/config.json"));
    CHECK(resolved.model.input.vocab_size == 11);
    CHECK(resolved.train.seed == 11);
}

TEST_CASE("evaluation writes a metrics file consistent with its printed lines") {
    std::string out;
    REQUIRE(run_cli("evaluate --checkpoint " + wpath("run_a/model.ckpt") + " --data " +
                        wpath("prep"),
                    &out) == 0);
    CHECK(out.find("na_acc: ") != std::string::npos);
    CHECK(out.find("rt_mse units: normalized") != std::string::npos);
    const nlohmann::json metrics = nlohmann::json::parse(slurp(wpath("run_a/metrics.json")));
    CHECK(metrics.at("task_mode") == "multi");
    CHECK(metrics.at("na_acc").get<double>() >= 0.0);
    CHECK(metrics.at("na_acc").get<double>() <= 1.0);
    CHECK(metrics.at("rt_mse_units") == "normalized");
    CHECK(metrics.contains("positions"));
}

TEST_CASE("finetune reports the trainable share and requires a peft section") {
    const std::string ft = R"({
  "data": {"grammar_path": ")" + grammar("g2.grammar") + R"(", "n_cases": 80, "test_fraction": 0.2},
  "peft": {"kind": "lora", "rank": 4, "alpha": 8},
  "train": {"task_mode": "multi", "learning_rate": 0.005, "batch_size": 16, "epochs": 2, "seed": 3},
  "output": {"directory": ")" + wpath("run_ft") + R"("}
})";
    write_file(wpath("ft.json"), ft);
    std::string out;
    REQUIRE(run_cli("finetune --config " + wpath("ft.json") + " --backbone " +
                        wpath("run_a/model.ckpt"),
                    &out) == 0);
    CHECK(out.find("trainable: ") != std::string::npos);
    CHECK(out.find("/16") != std::string::npos);
    CHECK(out.find("%)") != std::string::npos);
    CHECK(fs::exists(kWork / "run_ft" / "model.ckpt"));

    const RunConfig resolved = load_run_config(wpath("run_ft/config.json"));
    CHECK(resolved.peft == PeftKind::lora);
    CHECK(resolved.model.backbone.n_blocks == 2);

    std::string ev;
    CHECK(run_cli("evaluate --checkpoint " + wpath("run_ft/model.ckpt") + " --data " +
                      wpath("prep"),
                  &ev) == 0);

    const std::string no_peft = config_text(wpath("log.csv"), wpath("run_np"));
    write_file(wpath("np.json"), no_peft);
    CHECK(run_cli("finetune --config " + wpath("np.json") + " --backbone " +
                      wpath("run_a/model.ckpt"),
                  &out) == 2);
    CHECK(out.find("peft section") != std::string::npos);
}

TEST_CASE("grid command ranks entries and resumes from its results file") {
    const std::string space = R"({
  "entries": [
    {"name": "lr5e-3",
     "model": {"input": {"embed_dim": 16, "proj_dim": 16}, "backbone": {"n_blocks": 1, "model_dim": 16, "n_heads": 2, "dropout": 0.0}},
     "train": {"task_mode": "na", "learning_rate": 0.005, "batch_size": 16, "epochs": 2, "seed": 1}},
    {"name": "lr0",
     "model": {"input": {"embed_dim": 16, "proj_dim": 16}, "backbone": {"n_blocks": 1, "model_dim": 16, "n_heads": 2, "dropout": 0.0}},
     "train": {"task_mode": "na", "learning_rate": 0.0, "batch_size": 16, "epochs": 2, "seed": 1}}
  ]
})";
    write_file(wpath("space.json"), space);
    std::string out;
    REQUIRE(run_cli("grid --space " + wpath("space.json") + " --data " + wpath("prep") +
                        " --out " + wpath("gridout"),
                    &out) == 0);
    CHECK(out.find(" 1. lr5e-3") != std::string::npos);
    CHECK(out.find(" 2. lr0") != std::string::npos);
    const std::string first = slurp(wpath("gridout/results.csv"));

    REQUIRE(run_cli("grid --space " + wpath("space.json") + " --data " + wpath("prep") +
                        " --out " + wpath("gridout"),
                    &out) == 0);
    CHECK(slurp(wpath("gridout/results.csv")) == first);
    CHECK(fs::exists(kWork / "gridout" / "space.json"));

    const auto results = import_grid_results(wpath("gridout/results.csv"));
    CHECK(results.size() == 2);
}

TEST_CASE("curve export is idempotent byte for byte") {
    REQUIRE(run_cli("export-curves --report " + wpath("run_a/curves.csv") + " --out " +
                    wpath("curves_copy.csv")) == 0);
    CHECK(slurp(wpath("curves_copy.csv")) == slurp(wpath("run_a/curves.csv")));
}

TEST_CASE("user mistakes exit with code 2 and a named cause") {
    std::string out;
    CHECK(run_cli("pretrain --config " + wpath("missing.json"), &out) == 2);
    CHECK(out.find("error: ") != std::string::npos);

    write_file(wpath("typo.json"),
               R"({"data": {"csv_path": "x.csv"}, "trian": {}, "output": {"directory": "y"}})");
    CHECK(run_cli("pretrain --config " + wpath("typo.json"), &out) == 2);
    CHECK(out.find("unknown key 'trian'") != std::string::npos);

    write_file(wpath("nocol.csv"), "case_id,activity\nc1,a\n");
    CHECK(run_cli("preprocess --log " + wpath("nocol.csv") + " --out " + wpath("prep2"), &out) ==
          2);
    CHECK(out.find("timestamp") != std::string::npos);

    CHECK(run_cli("no-such-command", &out) == 2);
    CHECK(run_cli("", &out) == 2);
    CHECK(run_cli("evaluate --checkpoint " + wpath("nope.ckpt") + " --data " + wpath("prep"),
                  &out) == 2);
    CHECK(out.find("nope.ckpt") != std::string::npos);
    CHECK(run_cli("--help") == 0);
}
