#include "ppm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "ppm/csv.hpp"
#include "ppm/optimizer.hpp"
#include "ppm/ops.hpp"

namespace ppm {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

double elapsed_seconds(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

std::string fmt_cell(double v) {
    if (!std::isfinite(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_cell(const std::string& s) {
    if (s.empty()) return kNan;
    return std::strtod(s.c_str(), nullptr);
}

template <typename T>
struct LossNodes {
    TensorT<T> ce;     // undefined when the NA task is off
    TensorT<T> mse;    // undefined when the RT task is off
    TensorT<T> total;
};

template <typename T>
LossNodes<T> build_losses(const ForwardOutT<T>& out, const EncodedBatch& batch,
                          const TrainConfig& cfg, int vocab_size) {
    const int n = batch.batch * batch.len;
    LossNodes<T> nodes;
    if (cfg.task_mode != TaskMode::rt) {
        nodes.ce = cross_entropy_masked(reshape(out.na_logits, {n, vocab_size}), batch.y_act,
                                        batch.mask);
        nodes.total = cfg.task_mode == TaskMode::multi && cfg.w_na != 1.0
                          ? scale(nodes.ce, static_cast<T>(cfg.w_na))
                          : nodes.ce;
    }
    if (cfg.task_mode != TaskMode::na) {
        std::vector<T> rt(batch.y_rt.begin(), batch.y_rt.end());
        nodes.mse = mse_masked(reshape(out.rt_pred, {n}), rt, batch.mask);
        TensorT<T> term = cfg.task_mode == TaskMode::multi && cfg.w_rt != 1.0
                              ? scale(nodes.mse, static_cast<T>(cfg.w_rt))
                              : nodes.mse;
        nodes.total = nodes.total.defined() ? add(nodes.total, term) : term;
    }
    return nodes;
}

long long mask_count(const EncodedBatch& batch) {
    long long n = 0;
    for (uint8_t m : batch.mask) n += m ? 1 : 0;
    return n;
}

struct BatchTally {
    double ce_sum = 0.0;
    double se_sum = 0.0;
    long long hits = 0;
    long long hits_no_eos = 0;
    long long count = 0;
    long long count_no_eos = 0;

    void add_na(const std::vector<float>& logits, const EncodedBatch& batch, int vocab) {
        for (size_t p = 0; p < batch.mask.size(); ++p) {
            if (!batch.mask[p]) continue;
            const float* row = logits.data() + p * static_cast<size_t>(vocab);
            int best = 0;
            for (int v = 1; v < vocab; ++v)
                if (row[v] > row[best]) best = v;
            const bool hit = best == batch.y_act[p];
            hits += hit;
            if (batch.y_act[p] != Vocab::eos_id) {
                ++count_no_eos;
                hits_no_eos += hit;
            }
        }
    }

    void add_rt(const std::vector<float>& pred, const EncodedBatch& batch) {
        for (size_t p = 0; p < batch.mask.size(); ++p) {
            if (!batch.mask[p]) continue;
            const double d = static_cast<double>(pred[p]) - static_cast<double>(batch.y_rt[p]);
            se_sum += d * d;
        }
    }
};

double selection_loss(const EpochRow& row, TaskMode mode) {
    switch (mode) {
        case TaskMode::na: return row.na_loss;
        case TaskMode::rt: return row.rt_loss;
        case TaskMode::multi: return row.na_loss + row.rt_loss;
    }
    return kNan;
}

}  // namespace

std::string task_mode_name(TaskMode mode) {
    switch (mode) {
        case TaskMode::na: return "na";
        case TaskMode::rt: return "rt";
        case TaskMode::multi: return "multi";
    }
    return "?";
}

TaskMode task_mode_from_name(const std::string& name) {
    if (name == "na") return TaskMode::na;
    if (name == "rt") return TaskMode::rt;
    if (name == "multi") return TaskMode::multi;
    throw ConfigError("unknown task mode '" + name + "' (expected na, rt, or multi)");
}

void validate_train_config(const TrainConfig& cfg, const ModelConfig& model) {
    if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
    if (cfg.w_na < 0.0 || cfg.w_rt < 0.0) throw ConfigError("loss weights must be >= 0");
    if (cfg.task_mode == TaskMode::multi && cfg.w_na == 0.0 && cfg.w_rt == 0.0)
        throw ConfigError("multi-task training needs at least one nonzero loss weight");
    if (!(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0))
        throw ConfigError("val_fraction must be in [0, 1)");
    if (cfg.task_mode != TaskMode::rt && !model.heads.na)
        throw ConfigError("task mode needs the next-activity head");
    if (cfg.task_mode != TaskMode::na && !model.heads.rt)
        throw ConfigError("task mode needs the remaining-time head");
}

template <typename T>
TensorT<T> task_loss(const ForwardOutT<T>& out, const EncodedBatch& batch, const TrainConfig& cfg,
                     int vocab_size) {
    return build_losses(out, batch, cfg, vocab_size).total;
}

template TensorT<float> task_loss<float>(const ForwardOutT<float>&, const EncodedBatch&,
                                         const TrainConfig&, int);
template TensorT<double> task_loss<double>(const ForwardOutT<double>&, const EncodedBatch&,
                                           const TrainConfig&, int);

EvalResult evaluate(const Model& model, const std::vector<EncodedTrace>& data,
                    const TrainConfig& cfg, int batch_size) {
    const auto batches = make_batches(data, batch_size, 0);
    const int vocab = model.config().input.vocab_size;
    const bool has_na = cfg.task_mode != TaskMode::rt;
    const bool has_rt = cfg.task_mode != TaskMode::na;

    NoGradGuard guard;
    std::mt19937 rng(0);
    BatchTally tally;
    double ce_sum = 0.0, mse_sum = 0.0;
    for (const auto& batch : batches) {
        const auto out = model.forward(batch, rng, false);
        const auto nodes = build_losses(out, batch, cfg, vocab);
        const long long count = mask_count(batch);
        tally.count += count;
        if (has_na) {
            ce_sum += nodes.ce.item() * static_cast<double>(count);
            tally.add_na(out.na_logits.data(), batch, vocab);
        }
        if (has_rt) {
            mse_sum += nodes.mse.item() * static_cast<double>(count);
            tally.add_rt(out.rt_pred.data(), batch);
        }
    }

    EvalResult r;
    r.positions = tally.count;
    const double denom = static_cast<double>(std::max<long long>(1, tally.count));
    r.na_loss = has_na ? ce_sum / denom : kNan;
    r.na_acc = has_na ? static_cast<double>(tally.hits) / denom : kNan;
    r.na_acc_no_eos =
        has_na ? static_cast<double>(tally.hits_no_eos) /
                     static_cast<double>(std::max<long long>(1, tally.count_no_eos))
               : kNan;
    r.rt_loss = has_rt ? mse_sum / denom : kNan;
    r.rt_mse = r.rt_loss;
    return r;
}

std::pair<EventLog, EventLog> split_validation(const EventLog& train, double fraction) {
    if (fraction < 0.0 || fraction >= 1.0)
        throw ConfigError("validation fraction must be in [0, 1)");
    EventLog fit, val;
    if (fraction == 0.0 || train.cases.empty()) {
        fit = train;
        recompute_activity_set(val);
        return {fit, val};
    }
    std::vector<size_t> order(train.cases.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return train.cases[a].events.front().timestamp < train.cases[b].events.front().timestamp;
    });
    const size_t n_val = std::min(
        train.cases.size() - 1,
        static_cast<size_t>(std::ceil(fraction * static_cast<double>(train.cases.size()))));
    std::set<size_t> val_idx(order.end() - static_cast<long>(n_val), order.end());
    for (size_t i = 0; i < train.cases.size(); ++i)
        (val_idx.count(i) ? val : fit).cases.push_back(train.cases[i]);
    recompute_activity_set(fit);
    recompute_activity_set(val);
    return {fit, val};
}

TrainReport train(Model& model, const std::vector<EncodedTrace>& train_traces,
                  const std::vector<EncodedTrace>& val_traces, const TrainConfig& cfg) {
    validate_train_config(cfg, model.config());
    if (train_traces.empty()) throw DataError("no training traces");

    const auto run_start = std::chrono::steady_clock::now();
    const int vocab = model.config().input.vocab_size;
    const bool has_na = cfg.task_mode != TaskMode::rt;
    const bool has_rt = cfg.task_mode != TaskMode::na;

    AdamConfig ac;
    ac.lr = cfg.learning_rate;
    ac.clip_norm = cfg.clip_norm;
    Adam opt(ac);
    std::mt19937 dropout_rng(static_cast<uint32_t>(derive_seed(cfg.seed, 0xD0)));

    TrainReport report;
    const ParamCounts counts = count_params(model);
    report.total_params = counts.total;
    report.trainable_params = counts.trainable;

    double best = std::numeric_limits<double>::infinity();
    std::vector<std::vector<float>> best_values;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const auto batches =
            make_batches(train_traces, cfg.batch_size, derive_seed(cfg.seed, static_cast<uint64_t>(epoch)));

        BatchTally tally;
        double ce_sum = 0.0, mse_sum = 0.0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& batch = batches[bi];
            model.registry().zero_grad();
            const auto out = model.forward(batch, dropout_rng, true);
            const auto nodes = build_losses(out, batch, cfg, vocab);
            const double loss_value = nodes.total.item();
            if (!std::isfinite(loss_value))
                throw TrainAbort(epoch, static_cast<int>(bi),
                                 "non-finite loss " + std::to_string(loss_value) + " at epoch " +
                                     std::to_string(epoch) + ", batch " + std::to_string(bi));
            nodes.total.backward();
            opt.step(model.registry());

            const long long count = mask_count(batch);
            tally.count += count;
            if (has_na) {
                ce_sum += nodes.ce.item() * static_cast<double>(count);
                tally.add_na(out.na_logits.data(), batch, vocab);
            }
            if (has_rt) {
                mse_sum += nodes.mse.item() * static_cast<double>(count);
                tally.add_rt(out.rt_pred.data(), batch);
            }
        }

        EpochRow train_row;
        train_row.epoch = epoch;
        train_row.split = "train";
        const double denom = static_cast<double>(std::max<long long>(1, tally.count));
        train_row.na_loss = has_na ? ce_sum / denom : kNan;
        train_row.na_acc = has_na ? static_cast<double>(tally.hits) / denom : kNan;
        train_row.rt_loss = has_rt ? mse_sum / denom : kNan;
        train_row.rt_mse = has_rt ? tally.se_sum / denom : kNan;
        train_row.seconds = elapsed_seconds(epoch_start);
        report.rows.push_back(train_row);

        EpochRow select_row = train_row;
        if (!val_traces.empty()) {
            const auto val_start = std::chrono::steady_clock::now();
            const EvalResult val = evaluate(model, val_traces, cfg, cfg.batch_size);
            EpochRow val_row;
            val_row.epoch = epoch;
            val_row.split = "val";
            val_row.na_loss = val.na_loss;
            val_row.rt_loss = val.rt_loss;
            val_row.na_acc = val.na_acc;
            val_row.rt_mse = val.rt_mse;
            val_row.seconds = elapsed_seconds(val_start);
            report.rows.push_back(val_row);
            select_row = val_row;
        }

        const double sel = selection_loss(select_row, cfg.task_mode);
        if (sel < best) {
            best = sel;
            report.best_epoch = epoch;
            best_values.clear();
            for (const auto& name : model.registry().order)
                best_values.push_back(model.registry().tensor(name).data());
        }
    }

    if (!best_values.empty()) {
        size_t i = 0;
        for (const auto& name : model.registry().order)
            model.registry().tensor(name).data() = best_values[i++];
    }
    report.best_val_loss = best;
    report.wall_clock_hours = elapsed_seconds(run_start) / 3600.0;
    return report;
}

void export_curves(const TrainReport& report, const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : report.rows)
        rows.push_back({std::to_string(r.epoch), r.split, fmt_cell(r.na_loss), fmt_cell(r.rt_loss),
                        fmt_cell(r.na_acc), fmt_cell(r.rt_mse), fmt_cell(r.seconds)});
    csv_write_file(path, {"epoch", "split", "na_loss", "rt_loss", "na_acc", "rt_mse", "seconds"},
                   rows);
}

std::vector<EpochRow> import_curves(const std::string& path) {
    const CsvTable t = csv_read_file(path);
    const std::vector<std::string> expected = {"epoch",  "split",  "na_loss", "rt_loss",
                                              "na_acc", "rt_mse", "seconds"};
    if (t.header != expected) throw DataError(path + ": unexpected curve header");
    std::vector<EpochRow> rows;
    for (const auto& r : t.rows) {
        EpochRow row;
        row.epoch = std::atoi(r[0].c_str());
        row.split = r[1];
        row.na_loss = parse_cell(r[2]);
        row.rt_loss = parse_cell(r[3]);
        row.na_acc = parse_cell(r[4]);
        row.rt_mse = parse_cell(r[5]);
        row.seconds = parse_cell(r[6]);
        rows.push_back(row);
    }
    return rows;
}

namespace {

const std::vector<std::string> kGridHeader = {"name",   "params", "status", "val_loss",
                                              "na_acc", "rt_mse", "seconds"};

std::string flatten_params(const GridEntry& e) {
    std::string s = "mode=" + task_mode_name(e.train.task_mode);
    s += " backbone=" + std::string(e.model.backbone.kind == BackboneKind::transformer
                                        ? "transformer"
                                        : "recurrent");
    s += " blocks=" + std::to_string(e.model.backbone.n_blocks);
    s += " dim=" + std::to_string(e.model.backbone.model_dim);
    s += " lr=" + fmt_cell(e.train.learning_rate);
    s += " batch=" + std::to_string(e.train.batch_size);
    s += " epochs=" + std::to_string(e.train.epochs);
    switch (e.peft) {
        case PeftKind::none: s += " peft=none"; break;
        case PeftKind::freeze: {
            s += e.freeze.mode == FreezeMode::full ? " peft=freeze-full" : " peft=freeze(";
            if (e.freeze.mode == FreezeMode::partial) {
                for (size_t i = 0; i < e.freeze.layer_indices.size(); ++i)
                    s += (i ? "," : "") + std::to_string(e.freeze.layer_indices[i]);
                s += ")";
            }
            break;
        }
        case PeftKind::lora:
            s += " peft=lora r=" + std::to_string(e.lora.rank) +
                 " alpha=" + fmt_cell(e.lora.alpha);
            break;
    }
    return s;
}

void append_grid_row(const std::string& path, const GridResult& r) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot write " + path);
    const auto line = [&out](const std::vector<std::string>& fields) {
        for (size_t i = 0; i < fields.size(); ++i) {
            if (i) out << ',';
            out << csv_quote(fields[i]);
        }
        out << '\n';
    };
    if (fresh) line(kGridHeader);
    line({r.name, r.params, r.status, fmt_cell(r.val_loss), fmt_cell(r.na_acc),
          fmt_cell(r.rt_mse), fmt_cell(r.seconds)});
    out.flush();
}

}  // namespace

std::vector<GridResult> import_grid_results(const std::string& path) {
    const CsvTable t = csv_read_file(path);
    if (t.header != kGridHeader) throw DataError(path + ": unexpected grid results header");
    std::vector<GridResult> rows;
    for (const auto& r : t.rows) {
        GridResult g;
        g.name = r[0];
        g.params = r[1];
        g.status = r[2];
        g.val_loss = parse_cell(r[3]);
        g.na_acc = parse_cell(r[4]);
        g.rt_mse = parse_cell(r[5]);
        g.seconds = parse_cell(r[6]);
        rows.push_back(g);
    }
    return rows;
}

std::vector<GridResult> grid_search(const std::vector<GridEntry>& space,
                                    const std::vector<EncodedTrace>& train_traces,
                                    const std::vector<EncodedTrace>& val_traces,
                                    const std::string& results_csv) {
    if (space.empty()) throw ConfigError("grid space is empty");
    {
        std::set<std::string> names;
        for (const auto& e : space)
            if (!names.insert(e.name).second)
                throw ConfigError("duplicate grid entry name '" + e.name + "'");
    }

    std::map<std::string, GridResult> done;
    if (std::filesystem::exists(results_csv))
        for (const auto& r : import_grid_results(results_csv)) done[r.name] = r;

    std::vector<GridResult> results;
    for (const auto& entry : space) {
        const auto it = done.find(entry.name);
        if (it != done.end()) {
            results.push_back(it->second);
            continue;
        }
        GridResult r;
        r.name = entry.name;
        r.params = flatten_params(entry);
        const auto entry_start = std::chrono::steady_clock::now();
        try {
            Model model = Model::init(entry.model, entry.train.seed);
            if (entry.peft == PeftKind::freeze) apply_freeze(model, entry.freeze);
            if (entry.peft == PeftKind::lora)
                apply_lora(model, entry.lora, derive_seed(entry.train.seed, 0xA0A));
            const TrainReport rep = train(model, train_traces, val_traces, entry.train);
            const EvalResult final_eval =
                evaluate(model, val_traces.empty() ? train_traces : val_traces, entry.train,
                         entry.train.batch_size);
            r.status = "ok";
            r.val_loss = rep.best_val_loss;
            r.na_acc = final_eval.na_acc;
            r.rt_mse = final_eval.rt_mse;
        } catch (const std::exception& e) {
            r.status = std::string("failed: ") + e.what();
            r.val_loss = kNan;
            r.na_acc = kNan;
            r.rt_mse = kNan;
        }
        r.seconds = elapsed_seconds(entry_start);
        append_grid_row(results_csv, r);
        results.push_back(r);
    }

    std::stable_sort(results.begin(), results.end(), [](const GridResult& a, const GridResult& b) {
        const bool a_ok = a.status == "ok", b_ok = b.status == "ok";
        if (a_ok != b_ok) return a_ok;
        if (a_ok && a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
        return false;
    });
    return results;
}

}  // namespace ppm
