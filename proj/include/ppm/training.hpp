#pragma once

// Training loops for single-task (next activity, remaining time) and
// multi-task runs: joint masked loss, per-epoch train/validation metrics,
// best-validation checkpoint retention, deterministic seeding, curve CSV
// export, and a resumable grid-search runner.

#include <cstdint>
#include <string>
#include <vector>

#include "ppm/encoding.hpp"
#include "ppm/model.hpp"
#include "ppm/peft.hpp"

namespace ppm {

enum class TaskMode { na, rt, multi };

std::string task_mode_name(TaskMode mode);
TaskMode task_mode_from_name(const std::string& name);

struct TrainConfig {
    TaskMode task_mode = TaskMode::multi;
    double learning_rate = 1e-3;
    int batch_size = 32;
    int epochs = 1;
    double w_na = 1.0;
    double w_rt = 1.0;
    uint64_t seed = 0;
    double clip_norm = 0.0;      // <= 0 disables clipping
    double val_fraction = 0.1;   // chronologically last share of train cases
};

void validate_train_config(const TrainConfig& cfg, const ModelConfig& model);

// Absent-task metrics are NaN; they export as empty CSV cells.
struct EpochRow {
    int epoch = 0;
    std::string split;  // train | val | test
    double na_loss = 0.0;
    double rt_loss = 0.0;
    double na_acc = 0.0;
    double rt_mse = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochRow> rows;
    int64_t total_params = 0;
    int64_t trainable_params = 0;
    double wall_clock_hours = 0.0;
    int best_epoch = 0;          // 1-based; 0 when no epoch ran
    double best_val_loss = 0.0;  // selection loss at best_epoch
};

// Weighted masked loss over the configured tasks. Single-task modes drop the
// other term entirely instead of scaling it by zero.
template <typename T>
TensorT<T> task_loss(const ForwardOutT<T>& out, const EncodedBatch& batch, const TrainConfig& cfg,
                     int vocab_size);

struct EvalResult {
    double na_loss = 0.0;
    double rt_loss = 0.0;
    double na_acc = 0.0;
    double na_acc_no_eos = 0.0;  // accuracy excluding end-of-case positions
    double rt_mse = 0.0;
    long long positions = 0;
};

EvalResult evaluate(const Model& model, const std::vector<EncodedTrace>& data,
                    const TrainConfig& cfg, int batch_size = 64);

// Chronologically last `fraction` of cases (by first event) become validation.
std::pair<EventLog, EventLog> split_validation(const EventLog& train, double fraction);

// Trains in place; on return the model holds the best-validation parameters
// (best-train when no validation data was given).
TrainReport train(Model& model, const std::vector<EncodedTrace>& train_traces,
                  const std::vector<EncodedTrace>& val_traces, const TrainConfig& cfg);

void export_curves(const TrainReport& report, const std::string& path);
std::vector<EpochRow> import_curves(const std::string& path);

enum class PeftKind { none, freeze, lora };

struct GridEntry {
    std::string name;  // unique; the resume key
    ModelConfig model;
    TrainConfig train;
    PeftKind peft = PeftKind::none;
    FreezeConfig freeze;
    LoraConfig lora;
};

struct GridResult {
    std::string name;
    std::string params;  // flattened hyperparameters
    std::string status;  // ok | failed: <reason>
    double val_loss = 0.0;
    double na_acc = 0.0;
    double rt_mse = 0.0;
    double seconds = 0.0;
};

// Trains every entry, appending each finished row to results_csv as it lands
// so an interrupted grid resumes without recomputing. Returns all results
// ranked by validation loss (failures last).
std::vector<GridResult> grid_search(const std::vector<GridEntry>& space,
                                    const std::vector<EncodedTrace>& train_traces,
                                    const std::vector<EncodedTrace>& val_traces,
                                    const std::string& results_csv);

std::vector<GridResult> import_grid_results(const std::string& path);

}  // namespace ppm
