#pragma once

// Strict JSON run configuration (unknown keys are errors) plus the small
// file formats shared by the command-line tools: vocabulary, feature-stats,
// and split-manifest CSVs and the resolved-config copy written next to every
// checkpoint so runs can be reproduced and evaluated later.

#include <string>
#include <vector>

#include "ppm/event_log.hpp"
#include "ppm/training.hpp"

namespace ppm {

struct DataConfig {
    std::string csv_path;      // exactly one of csv_path / grammar_path
    std::string grammar_path;
    int n_cases = 0;           // grammar source only
    double test_fraction = 0.2;
};

struct RunConfig {
    DataConfig data;
    ModelConfig model;   // input.vocab_size 0 means derive from the data
    PeftKind peft = PeftKind::none;
    FreezeConfig freeze;
    LoraConfig lora;
    TrainConfig train;
    std::string out_dir;
    bool has_peft_section = false;
};

// Parses with strict schemas; every unknown key anywhere raises ConfigError.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

// Grid space file: {"entries": [{name, model, train, peft?}, ...]}.
std::vector<GridEntry> parse_grid_space(const std::string& json_text);
std::vector<GridEntry> load_grid_space(const std::string& path);

void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

void save_feature_stats(const FeatureStats& stats, const std::string& path);
FeatureStats load_feature_stats(const std::string& path);

void save_split_manifest(const SplitResult& split, const std::string& path);

}  // namespace ppm
