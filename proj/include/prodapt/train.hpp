#pragma once

// Frozen-backbone branch training: Adam over adapter + head parameters,
// per-epoch validation, patience-based early stopping and best-checkpoint
// retention. Deterministic under the config seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "prodapt/adapters.hpp"
#include "prodapt/common.hpp"
#include "prodapt/forward.hpp"
#include "prodapt/model.hpp"
#include "prodapt/tensor.hpp"

namespace prodapt {

struct TrainConfig {
    int epochs = 15;
    float learning_rate = 1e-4f;
    int batch_size = 4;
    int early_stop_patience = 3;
    float val_fraction = 0.1f;
    uint64_t seed = 42;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float clip_norm = 1.0f;

    void validate() const {
        if (epochs < 1) throw ContractError("epochs must be >= 1");
        if (!(val_fraction > 0.0f && val_fraction < 1.0f))
            throw ContractError("val_fraction must be in (0, 1)");
        if (early_stop_patience < 1) throw ContractError("early_stop_patience must be >= 1");
        if (batch_size < 1) throw ContractError("batch_size must be >= 1");
        if (!(learning_rate > 0.0f)) throw ContractError("learning_rate must be positive");
    }
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    float train_loss = 0.0f;
    float val_loss = 0.0f;
    bool improved = false;
    double wall_ms = 0.0;
};

struct TrainReport {
    std::string label;
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    float best_val_loss = 0.0f;
    bool stopped_early = false;
    uint64_t backbone_hash_before = 0;
    uint64_t backbone_hash_after = 0;
    size_t train_docs = 0;
    size_t val_docs = 0;
};

// ---------------------------------------------------------------------------
// Early stopping: strict-improvement running minimum with a patience budget
// of consecutive non-improving validations.
// ---------------------------------------------------------------------------

class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    struct Verdict {
        bool improved = false;
        bool stop = false;
    };

    Verdict observe(float val_loss) {
        ++epoch_;
        Verdict v;
        if (val_loss < best_) {
            best_ = val_loss;
            best_epoch_ = epoch_;
            bad_streak_ = 0;
            v.improved = true;
        } else {
            ++bad_streak_;
            if (bad_streak_ >= patience_) v.stop = true;
        }
        return v;
    }

    float best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

private:
    int patience_;
    int epoch_ = 0;
    int bad_streak_ = 0;
    int best_epoch_ = 0;
    float best_ = std::numeric_limits<float>::infinity();
};

// ---------------------------------------------------------------------------
// Adam over the branch parameters, with global-norm gradient clipping.
// ---------------------------------------------------------------------------

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, const TrainConfig& cfg)
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0f);
            v_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0f);
        }
    }

    void step() {
        // Clip at global norm across all parameters.
        double sq = 0.0;
        for (Tensor& p : params_) {
            if (!p.has_grad()) continue;
            const float* g = p.grad();
            const int64_t n = p.numel();
            for (int64_t i = 0; i < n; ++i) sq += static_cast<double>(g[i]) * g[i];
        }
        const double norm = std::sqrt(sq);
        const float clip =
            norm > cfg_.clip_norm ? static_cast<float>(cfg_.clip_norm / norm) : 1.0f;

        ++t_;
        const float b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
        const float bc1 = 1.0f - std::pow(b1, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(b2, static_cast<float>(t_));
        const float lr = cfg_.learning_rate;
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& p = params_[pi];
            if (!p.has_grad()) continue;
            const float* g = p.grad();
            float* w = p.mut_data();
            float* m = m_[pi].data();
            float* v = v_[pi].data();
            const int64_t n = p.numel();
            for (int64_t i = 0; i < n; ++i) {
                const float gc = g[i] * clip;
                m[i] = b1 * m[i] + (1.0f - b1) * gc;
                v[i] = b2 * v[i] + (1.0f - b2) * gc * gc;
                const float mhat = m[i] / bc1;
                const float vhat = v[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            }
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    TrainConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
};

inline std::vector<Tensor> branch_parameters(L1Branch& br) {
    std::vector<Tensor> out;
    br.for_each_param([&](const std::string&, const Tensor& t) { out.push_back(t); });
    return out;
}

// ---------------------------------------------------------------------------
// Batch assembly: documents explode into windows, windows are bucketed by
// length so padding stays small, and batch order is reshuffled per epoch.
// Padding slots feed kPadInputId and carry ignored targets.
// ---------------------------------------------------------------------------

namespace detail {

struct Window {
    const std::vector<int32_t>* doc = nullptr;
    size_t off = 0;
    size_t len = 0;
};

inline std::vector<Window> explode_windows(const std::vector<TokenSequence>& docs,
                                           size_t max_len) {
    std::vector<Window> out;
    for (const TokenSequence& d : docs) {
        for (const auto& [off, len] : doc_windows(d.ids.size(), max_len))
            out.push_back(Window{&d.ids, off, len});
    }
    return out;
}

struct Batch {
    std::vector<std::vector<int32_t>> inputs;  // padded to a common length
    std::vector<int32_t> targets;              // stacked, kIgnoreIndex on pads
    int64_t t = 0;
};

inline Batch pack_batch(std::span<const Window> windows) {
    Batch b;
    size_t t = 0;
    for (const Window& w : windows) t = std::max(t, w.len);
    b.t = static_cast<int64_t>(t);
    b.targets.assign(windows.size() * t, kIgnoreIndex);
    b.inputs.reserve(windows.size());
    for (size_t wi = 0; wi < windows.size(); ++wi) {
        const Window& w = windows[wi];
        std::vector<int32_t> in(t, kPadInputId);
        for (size_t i = 0; i < w.len; ++i) in[i] = (*w.doc)[w.off + i];
        for (size_t i = 0; i + 1 < w.len; ++i)
            b.targets[wi * t + i] = (*w.doc)[w.off + i + 1];
        b.inputs.push_back(std::move(in));
    }
    return b;
}

}  // namespace detail

// Mean document LM loss over a validation set.
inline float validate(const Backbone& bb, const L1Branch& branch,
                      const std::vector<TokenSequence>& val_set) {
    if (val_set.empty()) throw ContractError("validation set must be non-empty");
    double total = 0.0;
    for (const TokenSequence& doc : val_set)
        total += static_cast<double>(doc_lm_loss(bb, doc, &branch));
    return static_cast<float>(total / static_cast<double>(val_set.size()));
}

// Trains one branch on one language's documents. Only branch parameters are
// updated; the returned branch is the best-validation snapshot.
inline std::pair<L1Branch, TrainReport> train_branch(const Backbone& bb,
                                                     const std::vector<TokenSequence>& corpus,
                                                     const TrainConfig& cfg,
                                                     const AdapterConfig& acfg,
                                                     const std::string& label) {
    cfg.validate();
    acfg.validate(bb.cfg);
    if (corpus.empty()) throw ContractError("training corpus for '" + label + "' is empty");
    for (const TokenSequence& d : corpus) {
        if (d.ids.size() < 2)
            throw ContractError("document with fewer than 2 tokens in corpus for '" + label + "'");
        for (int32_t id : d.ids)
            if (id < 0 || id >= bb.cfg.vocab_size)
                throw ContractError("token id " + std::to_string(id) +
                                    " outside backbone vocabulary");
    }

    TrainReport report;
    report.label = label;
    report.backbone_hash_before = backbone_hash(bb);

    // Seeded train/validation split. A single-document corpus degenerates
    // to validating on the training document.
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(derive_seed(derive_seed(cfg.seed, "split"), label));
    split_rng.shuffle(order);
    size_t n_val = corpus.size() == 1
                       ? 0
                       : std::clamp<size_t>(
                             static_cast<size_t>(std::lround(cfg.val_fraction *
                                                             static_cast<double>(corpus.size()))),
                             1, corpus.size() - 1);
    std::vector<TokenSequence> train_docs, val_docs;
    for (size_t i = 0; i < order.size(); ++i)
        (i < n_val ? val_docs : train_docs).push_back(corpus[order[i]]);
    if (val_docs.empty()) val_docs = train_docs;
    report.train_docs = train_docs.size();
    report.val_docs = val_docs.size();

    L1Branch branch = init_branch(acfg, bb, label, cfg.seed);
    std::vector<Tensor> params = branch_parameters(branch);
    AdamOptimizer opt(params, cfg);

    const auto windows =
        detail::explode_windows(train_docs, static_cast<size_t>(bb.cfg.max_seq_len));
    // Bucket by length: stable sort keeps determinism.
    std::vector<size_t> widx(windows.size());
    for (size_t i = 0; i < widx.size(); ++i) widx[i] = i;
    std::stable_sort(widx.begin(), widx.end(),
                     [&](size_t a, size_t b) { return windows[a].len < windows[b].len; });
    std::vector<std::vector<size_t>> batches;
    for (size_t i = 0; i < widx.size(); i += static_cast<size_t>(cfg.batch_size)) {
        const size_t end = std::min(widx.size(), i + static_cast<size_t>(cfg.batch_size));
        batches.emplace_back(widx.begin() + static_cast<long>(i),
                             widx.begin() + static_cast<long>(end));
    }

    EarlyStopper stopper(cfg.early_stop_patience);
    L1Branch best = branch.clone();
    int best_epoch = 0;
    float best_val = std::numeric_limits<float>::infinity();

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Stopwatch sw;
        Rng epoch_rng(derive_seed(derive_seed(cfg.seed, "epoch" + std::to_string(epoch)), label));
        std::vector<size_t> batch_order(batches.size());
        for (size_t i = 0; i < batch_order.size(); ++i) batch_order[i] = i;
        epoch_rng.shuffle(batch_order);

        double epoch_loss_weighted = 0.0;
        int64_t epoch_kept = 0;
        for (size_t bo : batch_order) {
            std::vector<detail::Window> batch_windows;
            for (size_t wi : batches[bo]) batch_windows.push_back(windows[wi]);
            const detail::Batch packed = detail::pack_batch(batch_windows);

            Tape tape;
            std::vector<std::span<const int32_t>> streams;
            streams.reserve(packed.inputs.size());
            std::vector<const L1Branch*> stream_branches(packed.inputs.size(), &branch);
            for (const auto& in : packed.inputs) streams.emplace_back(in);
            Tensor logits = multi_forward(bb, streams, stream_branches, &tape);
            CeResult ce = cross_entropy(logits, packed.targets, kIgnoreIndex, &tape);
            const float loss = ce.loss.item();
            if (!std::isfinite(loss))
                throw NumericError("non-finite training loss for '" + label + "' at epoch " +
                                   std::to_string(epoch));
            epoch_loss_weighted += static_cast<double>(loss) * static_cast<double>(ce.kept);
            epoch_kept += ce.kept;

            opt.zero_grad();
            backward(ce.loss, tape);
            opt.step();
        }

        const float val_loss = validate(bb, branch, val_docs);
        if (!std::isfinite(val_loss))
            throw NumericError("non-finite validation loss for '" + label + "' at epoch " +
                               std::to_string(epoch));
        const auto verdict = stopper.observe(val_loss);
        if (verdict.improved) {
            best = branch.clone();
            best_epoch = epoch;
            best_val = val_loss;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_kept > 0 ? static_cast<float>(epoch_loss_weighted /
                                                             static_cast<double>(epoch_kept))
                                        : 0.0f;
        rec.val_loss = val_loss;
        rec.improved = verdict.improved;
        rec.wall_ms = sw.elapsed_ms();
        report.epochs.push_back(rec);

        if (verdict.stop) {
            report.stopped_early = true;
            break;
        }
    }

    report.best_epoch = best_epoch;
    report.best_val_loss = best_val;
    best.meta.trained_epochs = static_cast<uint32_t>(report.epochs.size());
    best.meta.best_val_loss = best_val;
    report.backbone_hash_after = backbone_hash(bb);
    return {std::move(best), std::move(report)};
}

}  // namespace prodapt
