#pragma once

// Report emission: every report is written both as a human-readable table
// and as machine-readable line-delimited JSON. Timing-dependent fields keep
// a "_ms" suffix so downstream comparisons can mask them.

#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prodapt/bench.hpp"
#include "prodapt/cv.hpp"
#include "prodapt/engine.hpp"
#include "prodapt/train.hpp"

namespace prodapt {

// ---------------------------------------------------------------------------
// Train reports: one record per epoch plus a summary record.
// ---------------------------------------------------------------------------

inline void write_train_report_jsonl(const TrainReport& r, std::ostream& os) {
    for (const EpochRecord& e : r.epochs) {
        nlohmann::json j;
        j["record"] = "epoch";
        j["label"] = r.label;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        j["val_loss"] = e.val_loss;
        j["improved"] = e.improved;
        j["wall_ms"] = e.wall_ms;
        os << j.dump() << "\n";
    }
    nlohmann::json s;
    s["record"] = "summary";
    s["label"] = r.label;
    s["best_epoch"] = r.best_epoch;
    s["best_val_loss"] = r.best_val_loss;
    s["stopped_early"] = r.stopped_early;
    s["epochs_run"] = r.epochs.size();
    s["train_docs"] = r.train_docs;
    s["val_docs"] = r.val_docs;
    s["backbone_hash_before"] = hex_u64(r.backbone_hash_before);
    s["backbone_hash_after"] = hex_u64(r.backbone_hash_after);
    os << s.dump() << "\n";
}

// ---------------------------------------------------------------------------
// Classification results (per-label losses, argmin pick).
// ---------------------------------------------------------------------------

inline nlohmann::json inference_to_json(const InferenceResult& r, const std::string& doc_id) {
    nlohmann::json j;
    j["record"] = "classify";
    if (!doc_id.empty()) j["id"] = doc_id;
    nlohmann::json losses = nlohmann::json::object();
    for (const LabelLoss& l : r.losses) losses[l.label] = l.loss;
    j["losses"] = losses;
    j["predicted"] = r.predicted;
    j["margin"] = r.margin;
    j["tie"] = r.tie;
    j["wall_ms"] = r.wall_ms;
    return j;
}

inline void print_inference(const InferenceResult& r, std::ostream& os) {
    os << "per-branch LM loss:\n";
    for (const LabelLoss& l : r.losses) {
        os << "  " << std::left << std::setw(12) << l.label << std::fixed
           << std::setprecision(4) << l.loss;
        if (l.label == r.predicted) os << "   <- min";
        os << "\n";
    }
    os << "predicted: " << r.predicted;
    if (r.tie) os << "  (tie, first branch wins)";
    os << "  margin " << std::setprecision(4) << r.margin << "  (" << std::setprecision(2)
       << r.wall_ms << " ms)\n";
}

// ---------------------------------------------------------------------------
// Cross-validation reports.
// ---------------------------------------------------------------------------

inline void write_cv_report_jsonl(const CvReport& r, std::ostream& os) {
    for (const FoldResult& f : r.folds) {
        nlohmann::json j;
        j["record"] = "fold";
        j["system"] = cv_system_name(r.system);
        j["fold"] = f.fold;
        j["eval_docs"] = f.eval_docs;
        j["correct"] = f.correct;
        j["accuracy"] = f.accuracy;
        j["train_folds"] = f.train_folds;
        j["wall_ms"] = f.wall_ms;
        os << j.dump() << "\n";
    }
    nlohmann::json s;
    s["record"] = "summary";
    s["system"] = cv_system_name(r.system);
    s["k"] = r.k;
    s["seed"] = r.seed;
    s["mean_accuracy"] = r.mean_accuracy;
    os << s.dump() << "\n";
}

inline void print_cv_report(const CvReport& r, std::ostream& os) {
    os << "system: " << cv_system_name(r.system) << "   k=" << r.k << "   seed=" << r.seed
       << "\n";
    os << "fold   docs   correct   accuracy\n";
    for (const FoldResult& f : r.folds)
        os << std::setw(4) << f.fold << std::setw(7) << f.eval_docs << std::setw(10) << f.correct
           << std::setw(11) << std::fixed << std::setprecision(4) << f.accuracy << "\n";
    os << "mean accuracy: " << std::fixed << std::setprecision(4) << r.mean_accuracy << "\n";
}

// ---------------------------------------------------------------------------
// Bench reports.
// ---------------------------------------------------------------------------

inline void write_bench_report_jsonl(const BenchReport& r, std::ostream& os) {
    for (const BenchRow& row : r.rows) {
        nlohmann::json j;
        j["record"] = "bench";
        j["system"] = row.system;
        j["storage_bytes"] = row.storage_bytes;
        j["params_total"] = row.params_total;
        j["params_trainable"] = row.params_trainable;
        j["peak_resident_est_bytes"] = row.peak_resident_est;
        j["per_doc_ms_median"] = row.per_doc_ms_median;
        j["per_doc_ms_min"] = row.per_doc_ms_min;
        j["per_doc_ms_max"] = row.per_doc_ms_max;
        j["rel_speed"] = row.rel_speed;
        j["raw_per_doc_ms"] = row.raw_per_doc_ms;
        os << j.dump() << "\n";
    }
    nlohmann::json s;
    s["record"] = "summary";
    s["reference_system"] = r.reference_system;
    s["repetitions"] = r.repetitions;
    s["warmup"] = r.warmup;
    s["low_confidence"] = r.low_confidence;
    s["sample_docs"] = r.sample_docs;
    s["hardware_threads"] = r.env.hardware_threads;
    s["bench_threads"] = r.env.bench_threads;
    s["compiler"] = r.env.compiler;
    os << s.dump() << "\n";
}

inline std::string human_bytes(uint64_t b) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    if (b >= 1024ull * 1024 * 1024) os << static_cast<double>(b) / (1024.0 * 1024 * 1024) << " GiB";
    else if (b >= 1024ull * 1024) os << static_cast<double>(b) / (1024.0 * 1024) << " MiB";
    else if (b >= 1024) os << static_cast<double>(b) / 1024.0 << " KiB";
    else os << b << " B";
    return os.str();
}

inline void print_bench_report(const BenchReport& r, std::ostream& os) {
    os << "repetitions: " << r.repetitions << " (+" << r.warmup << " warmup), sample "
       << r.sample_docs << " docs, threads " << r.env.bench_threads;
    if (r.low_confidence) os << "   [LOW CONFIDENCE: repetitions < 2]";
    os << "\n";
    os << std::left << std::setw(20) << "system" << std::right << std::setw(12) << "storage"
       << std::setw(14) << "params" << std::setw(12) << "trainable" << std::setw(14)
       << "per-doc ms" << std::setw(10) << "speed" << "\n";
    for (const BenchRow& row : r.rows) {
        std::ostringstream speed;
        speed << std::fixed << std::setprecision(1) << row.rel_speed << "x";
        os << std::left << std::setw(20) << row.system << std::right << std::setw(12)
           << human_bytes(row.storage_bytes) << std::setw(14) << row.params_total << std::setw(12)
           << row.params_trainable << std::setw(14) << std::fixed << std::setprecision(3)
           << row.per_doc_ms_median << std::setw(10) << speed.str() << "\n";
    }
    os << "reference (1.0x): " << r.reference_system << "\n";
}

}  // namespace prodapt
