#pragma once

// Stratified k-fold cross-validation for both systems. Each fold trains on
// the other k-1 folds and is scored on the held-out fold; vocabulary and
// models only ever see training folds, and the fold bookkeeping is asserted
// before any evaluation.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "prodapt/common.hpp"
#include "prodapt/configfile.hpp"
#include "prodapt/corpus.hpp"
#include "prodapt/engine.hpp"
#include "prodapt/svm.hpp"
#include "prodapt/train.hpp"

namespace prodapt {

enum class CvSystem { Prodapt, Svm };

inline const char* cv_system_name(CvSystem s) {
    return s == CvSystem::Prodapt ? "prodapt" : "svm";
}

struct FoldResult {
    int fold = 0;
    size_t eval_docs = 0;
    size_t correct = 0;
    double accuracy = 0.0;
    std::vector<int> train_folds;  // leakage bookkeeping
    double wall_ms = 0.0;
};

struct CvReport {
    CvSystem system = CvSystem::Prodapt;
    int k = 0;
    uint64_t seed = 0;
    std::vector<FoldResult> folds;
    double mean_accuracy = 0.0;
};

namespace detail {

inline void assert_no_leakage(const FoldPlan& plan, int eval_fold,
                              const std::vector<int>& train_folds) {
    for (int f : train_folds)
        if (f == eval_fold)
            throw ContractError("fold leakage: evaluation fold " + std::to_string(eval_fold) +
                                " appears in the training folds");
    if (static_cast<int>(train_folds.size()) != plan.k - 1)
        throw ContractError("fold bookkeeping: expected " + std::to_string(plan.k - 1) +
                            " training folds, saw " + std::to_string(train_folds.size()));
}

}  // namespace detail

// k-fold protocol. `threads` parallelizes per-label branch training inside a
// fold (branch independence makes that safe); evaluation is sequential.
inline CvReport run_cv(const std::vector<CorpusRecord>& records, int k, CvSystem system,
                       const EngineConfig& cfg, uint64_t seed, int threads = 1) {
    const FoldPlan plan = make_folds(records, k, seed);
    const std::vector<std::string> labels = label_set(records);

    // Tokenize once.
    std::vector<TokenSequence> tokens;
    tokens.reserve(records.size());
    for (const CorpusRecord& r : records) tokens.push_back(tokenize(r.text));

    CvReport report;
    report.system = system;
    report.k = k;
    report.seed = seed;

    // The backbone never sees data, so one frozen instance serves all folds.
    std::shared_ptr<const Backbone> bb;
    if (system == CvSystem::Prodapt)
        bb = std::make_shared<const Backbone>(init_backbone(cfg.model, seed));

    double acc_sum = 0.0;
    for (int fold = 0; fold < k; ++fold) {
        Stopwatch sw;
        const std::vector<size_t> eval_idx = plan.fold_indices(fold);
        const std::vector<size_t> train_idx = plan.complement_indices(fold);

        std::vector<int> train_folds;
        for (int f = 0; f < k; ++f)
            if (f != fold) train_folds.push_back(f);
        detail::assert_no_leakage(plan, fold, train_folds);

        FoldResult fr;
        fr.fold = fold;
        fr.train_folds = train_folds;
        fr.eval_docs = eval_idx.size();

        if (system == CvSystem::Prodapt) {
            std::map<std::string, std::vector<TokenSequence>> per_label;
            for (size_t i : train_idx) per_label[records[i].label].push_back(tokens[i]);
            std::vector<BranchSlot> slots(labels.size());
            parallel_for(static_cast<int64_t>(labels.size()), threads, [&](int64_t li) {
                const std::string& label = labels[static_cast<size_t>(li)];
                TrainConfig tc = cfg.train;
                tc.seed = derive_seed(derive_seed(seed, "cv-fold"), static_cast<uint64_t>(fold));
                auto [branch, rep] = train_branch(*bb, per_label.at(label), tc, cfg.adapter, label);
                slots[static_cast<size_t>(li)].branch = std::move(branch);
            });
            FusedModel fm(bb, std::move(slots));
            for (size_t i : eval_idx) {
                const InferenceResult r = classify(fm, tokens[i], threads);
                if (r.predicted == records[i].label) ++fr.correct;
            }
        } else {
            std::vector<TokenSequence> train_docs;
            for (size_t i : train_idx) train_docs.push_back(tokens[i]);
            const Vocabulary vocab = Vocabulary::build(train_docs, cfg.svm.min_df);
            std::vector<SvmExample> examples;
            examples.reserve(train_idx.size());
            for (size_t i : train_idx)
                examples.push_back(SvmExample{featurize(tokens[i], vocab), records[i].label});
            const LinearOVRModel model = train_svm(examples, vocab, cfg.svm);
            for (size_t i : eval_idx) {
                const SvmPrediction p = predict_svm(model, featurize(tokens[i], vocab));
                if (p.label == records[i].label) ++fr.correct;
            }
        }

        fr.accuracy = fr.eval_docs > 0
                          ? static_cast<double>(fr.correct) / static_cast<double>(fr.eval_docs)
                          : 0.0;
        fr.wall_ms = sw.elapsed_ms();
        acc_sum += fr.accuracy;
        report.folds.push_back(std::move(fr));
    }
    report.mean_accuracy = acc_sum / static_cast<double>(k);
    return report;
}

}  // namespace prodapt
