#pragma once

// Benchmark suite: storage footprint, parameter counts and per-document
// inference latency for the fused engine, both sequential modes and the
// unigram SVM. Warmup repetitions are discarded, the configured repetition
// count is timed, and medians are reported alongside the raw measurements.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prodapt/common.hpp"
#include "prodapt/corpus.hpp"
#include "prodapt/engine.hpp"
#include "prodapt/svm.hpp"

namespace prodapt {

struct BenchRow {
    std::string system;
    uint64_t storage_bytes = 0;
    int64_t params_total = 0;
    int64_t params_trainable = 0;
    uint64_t peak_resident_est = 0;
    double per_doc_ms_median = 0.0;
    double per_doc_ms_min = 0.0;
    double per_doc_ms_max = 0.0;
    double rel_speed = 1.0;  // slowest row = 1.0
    std::vector<double> raw_per_doc_ms;
};

struct BenchEnvironment {
    int hardware_threads = 0;
    int bench_threads = 1;
    std::string compiler;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::string reference_system;  // the slowest row, rel_speed anchor
    int repetitions = 0;
    int warmup = 0;
    bool low_confidence = false;  // repetitions < 2
    size_t sample_docs = 0;
    BenchEnvironment env;
};

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Rough resident-set estimate: parameters plus one window of activations.
inline uint64_t resident_estimate(const Backbone& bb, int64_t branch_params, int64_t n_branches) {
    const int64_t t = bb.cfg.max_seq_len;
    const int64_t d = bb.cfg.d_model;
    const int64_t per_stream_activations =
        t * (6 * d + bb.cfg.d_ffn + bb.cfg.vocab_size) + bb.cfg.n_heads * t * t;
    const int64_t params = count_parameters(bb).total + n_branches * branch_params;
    return static_cast<uint64_t>((params + n_branches * per_stream_activations) * 4);
}

}  // namespace detail

// Runs the full benchmark. The fused model must be checkpoint-backed (from
// a bundle manifest) so storage rows and the reload mode are meaningful.
// Timing brackets loss computation only; documents arrive pre-tokenized.
// Repetitions are interleaved round-robin across the systems so slow host
// phases spread evenly instead of biasing one system's block.
inline BenchReport bench(const FusedModel& fm, const std::vector<TokenSequence>& docs,
                         const std::optional<LinearOVRModel>& svm_model,
                         const std::string& svm_path, int repetitions = 100, int warmup = 10,
                         int threads = 1) {
    if (repetitions < 1) throw ContractError("bench repetitions must be >= 1");
    if (docs.empty()) throw ContractError("bench requires a non-empty document sample");
    if (fm.backbone_path().empty())
        throw DataError("bench requires a checkpoint-backed bundle (assemble one first)");

    BenchReport report;
    report.repetitions = repetitions;
    report.warmup = warmup;
    report.low_confidence = repetitions < 2;
    report.sample_docs = docs.size();
    report.env.hardware_threads = default_thread_count();
    report.env.bench_threads = threads;
#if defined(__VERSION__)
    report.env.compiler = __VERSION__;
#endif

    const uint64_t backbone_bytes = file_size_bytes(fm.backbone_path());
    uint64_t branch_bytes = 0;
    for (const BranchSlot& s : fm.slots()) branch_bytes += file_size_bytes(s.source_path);
    const int64_t n = static_cast<int64_t>(fm.branch_count());
    const ParamCounts bb_counts = count_parameters(fm.backbone());
    int64_t branch_total = 0;
    for (const BranchSlot& s : fm.slots()) branch_total += count_parameters(s.branch).total;
    const int64_t per_branch = n > 0 ? branch_total / n : 0;

    std::vector<std::function<void()>> bodies;

    // Fused engine: shared backbone + all branch payloads resident.
    {
        BenchRow row;
        row.system = "fused";
        row.storage_bytes = backbone_bytes + branch_bytes;
        row.params_total = bb_counts.total + branch_total;
        row.params_trainable = branch_total;
        row.peak_resident_est = detail::resident_estimate(fm.backbone(), per_branch, n);
        report.rows.push_back(std::move(row));
        bodies.emplace_back([&fm, &docs, threads]() {
            for (const TokenSequence& d : docs) (void)fused_losses(fm, d, threads);
        });
    }

    // Sequential without reload: same residency as fused, linear schedule.
    {
        BenchRow row;
        row.system = "sequential";
        row.storage_bytes = backbone_bytes + branch_bytes;
        row.params_total = bb_counts.total + branch_total;
        row.params_trainable = branch_total;
        row.peak_resident_est = detail::resident_estimate(fm.backbone(), per_branch, n);
        report.rows.push_back(std::move(row));
        bodies.emplace_back([&fm, &docs]() {
            for (const TokenSequence& d : docs) (void)sequential_losses(fm, d, false);
        });
    }

    // Sequential with load/unload of one complete model per branch: the
    // storage row is what a bank of standalone models would occupy.
    {
        BenchRow row;
        row.system = "sequential+reload";
        row.storage_bytes = static_cast<uint64_t>(n) * backbone_bytes + branch_bytes;
        row.params_total = n * (bb_counts.total + per_branch);
        row.params_trainable = branch_total;
        row.peak_resident_est = detail::resident_estimate(fm.backbone(), per_branch, 1);
        report.rows.push_back(std::move(row));
        bodies.emplace_back([&fm, &docs]() {
            for (const TokenSequence& d : docs) (void)sequential_losses(fm, d, true);
        });
    }

    if (svm_model) {
        BenchRow row;
        row.system = "unigram-svm";
        row.storage_bytes = svm_path.empty() ? 0 : file_size_bytes(svm_path);
        const int64_t dim = svm_model->vocab.size();
        row.params_total = static_cast<int64_t>(svm_model->labels.size()) * (dim + 1);
        row.params_trainable = row.params_total;
        row.peak_resident_est = static_cast<uint64_t>(row.params_total) * 4;
        report.rows.push_back(std::move(row));
        const LinearOVRModel* model = &*svm_model;
        bodies.emplace_back([model, &docs]() {
            for (const TokenSequence& d : docs)
                (void)predict_svm(*model, featurize(d, model->vocab));
        });
    }

    for (int w = 0; w < warmup; ++w)
        for (const auto& body : bodies) body();
    for (auto& row : report.rows) row.raw_per_doc_ms.reserve(static_cast<size_t>(repetitions));
    for (int r = 0; r < repetitions; ++r) {
        for (size_t si = 0; si < bodies.size(); ++si) {
            Stopwatch sw;
            bodies[si]();
            report.rows[si].raw_per_doc_ms.push_back(sw.elapsed_ms() /
                                                     static_cast<double>(docs.size()));
        }
    }

    // Medians, spreads and relative speed against the slowest row.
    double slowest = 0.0;
    for (BenchRow& row : report.rows) {
        row.per_doc_ms_median = detail::median_of(row.raw_per_doc_ms);
        row.per_doc_ms_min = *std::min_element(row.raw_per_doc_ms.begin(), row.raw_per_doc_ms.end());
        row.per_doc_ms_max = *std::max_element(row.raw_per_doc_ms.begin(), row.raw_per_doc_ms.end());
        if (row.per_doc_ms_median > slowest) {
            slowest = row.per_doc_ms_median;
            report.reference_system = row.system;
        }
    }
    for (BenchRow& row : report.rows)
        row.rel_speed = row.per_doc_ms_median > 0.0 ? slowest / row.per_doc_ms_median : 0.0;
    return report;
}

inline const BenchRow& bench_row(const BenchReport& report, const std::string& system) {
    for (const BenchRow& r : report.rows)
        if (r.system == system) return r;
    throw ContractError("bench report has no row for system '" + system + "'");
}

}  // namespace prodapt
