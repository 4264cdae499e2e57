#pragma once

// Unigram SVM baseline: L2-normalized bag-of-token counts into one-vs-rest
// linear classifiers trained with Pegasos-style hinge-loss subgradient
// descent. Serves as the speed/accuracy floor next to the fused engine.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "prodapt/checkpoint.hpp"
#include "prodapt/common.hpp"
#include "prodapt/corpus.hpp"
#include "prodapt/model.hpp"

namespace prodapt {

struct SvmConfig {
    float lambda = 1e-4f;
    int epochs = 20;
    uint64_t seed = 7;
    int min_df = 2;  // minimum document frequency for a vocabulary entry

    void validate() const {
        if (!(lambda > 0.0f)) throw ContractError("svm lambda must be positive");
        if (epochs < 1) throw ContractError("svm epochs must be >= 1");
        if (min_df < 1) throw ContractError("svm min_df must be >= 1");
    }
};

// Token -> dense feature index map, built from training folds only. Begin
// and end markers are not features.
struct Vocabulary {
    std::vector<int32_t> tokens;  // feature index -> token id
    std::map<int32_t, int32_t> index;
    int min_df = 2;

    int32_t size() const { return static_cast<int32_t>(tokens.size()); }

    static Vocabulary build(const std::vector<TokenSequence>& docs, int min_df) {
        std::map<int32_t, int32_t> df;
        for (const TokenSequence& d : docs) {
            std::set<int32_t> seen;
            for (int32_t id : d.ids)
                if (id < kByteVocab) seen.insert(id);
            for (int32_t id : seen) ++df[id];
        }
        Vocabulary v;
        v.min_df = min_df;
        for (const auto& [token, count] : df) {
            if (count >= min_df) {
                v.index[token] = static_cast<int32_t>(v.tokens.size());
                v.tokens.push_back(token);
            }
        }
        return v;
    }
};

struct SparseVec {
    std::vector<std::pair<int32_t, float>> entries;  // sorted by index
    bool degenerate = false;                         // empty or all-OOV input
};

// Unigram counts, L2-normalized; out-of-vocabulary tokens are dropped.
inline SparseVec featurize(const TokenSequence& doc, const Vocabulary& vocab) {
    std::map<int32_t, float> counts;
    for (int32_t id : doc.ids) {
        if (id >= kByteVocab) continue;
        const auto it = vocab.index.find(id);
        if (it != vocab.index.end()) counts[it->second] += 1.0f;
    }
    SparseVec v;
    if (counts.empty()) {
        v.degenerate = true;
        return v;
    }
    double sq = 0.0;
    for (const auto& [idx, c] : counts) sq += static_cast<double>(c) * c;
    const float inv = static_cast<float>(1.0 / std::sqrt(sq));
    v.entries.reserve(counts.size());
    for (const auto& [idx, c] : counts) v.entries.emplace_back(idx, c * inv);
    return v;
}

struct LinearOVRModel {
    std::vector<std::string> labels;
    std::vector<std::vector<float>> weights;  // per label, length vocab.size()
    std::vector<float> bias;                  // per label
    Vocabulary vocab;
    SvmConfig cfg;
};

struct SvmExample {
    SparseVec features;
    std::string label;
};

// Pegasos primal subgradient descent, one binary problem per label. Every
// label sees the same seeded sample order, so relabeling the data permutes
// the per-label weight vectors and nothing else.
inline LinearOVRModel train_svm(const std::vector<SvmExample>& data, const Vocabulary& vocab,
                                const SvmConfig& cfg) {
    cfg.validate();
    std::set<std::string> label_names;
    for (const SvmExample& e : data) label_names.insert(e.label);
    if (label_names.size() < 2)
        throw ContractError("svm training requires at least 2 labels, got " +
                            std::to_string(label_names.size()));

    LinearOVRModel model;
    model.labels.assign(label_names.begin(), label_names.end());
    model.vocab = vocab;
    model.cfg = cfg;
    const size_t dim = static_cast<size_t>(vocab.size());
    model.weights.assign(model.labels.size(), std::vector<float>(dim, 0.0f));
    model.bias.assign(model.labels.size(), 0.0f);

    // Shared shuffled order per epoch.
    std::vector<std::vector<size_t>> epoch_orders;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(derive_seed(cfg.seed, "svm-epoch"), static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        epoch_orders.push_back(std::move(order));
    }

    for (size_t li = 0; li < model.labels.size(); ++li) {
        const std::string& target = model.labels[li];
        std::vector<float>& w = model.weights[li];
        float& b = model.bias[li];
        int64_t t = 0;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            for (size_t idx : epoch_orders[static_cast<size_t>(epoch)]) {
                const SvmExample& ex = data[idx];
                ++t;
                const float eta = 1.0f / (cfg.lambda * static_cast<float>(t));
                const float y = ex.label == target ? 1.0f : -1.0f;
                float score = b;
                for (const auto& [fi, fv] : ex.features.entries)
                    score += w[static_cast<size_t>(fi)] * fv;
                const float shrink = 1.0f - eta * cfg.lambda;
                for (float& wv : w) wv *= shrink;
                if (y * score < 1.0f) {
                    for (const auto& [fi, fv] : ex.features.entries)
                        w[static_cast<size_t>(fi)] += eta * y * fv;
                    b += eta * y;  // bias stays unregularized
                }
            }
        }
    }
    return model;
}

struct SvmPrediction {
    std::string label;
    bool tie = false;
};

inline SvmPrediction predict_svm(const LinearOVRModel& model, const SparseVec& vec) {
    for (const auto& [fi, fv] : vec.entries)
        if (fi < 0 || fi >= model.vocab.size())
            throw ContractError("feature index " + std::to_string(fi) +
                                " outside model dimension " + std::to_string(model.vocab.size()));
    size_t win = 0;
    float best = -std::numeric_limits<float>::infinity();
    std::vector<float> scores(model.labels.size());
    for (size_t li = 0; li < model.labels.size(); ++li) {
        float s = model.bias[li];
        const std::vector<float>& w = model.weights[li];
        for (const auto& [fi, fv] : vec.entries) s += w[static_cast<size_t>(fi)] * fv;
        scores[li] = s;
        if (s > best) {
            best = s;
            win = li;
        }
    }
    SvmPrediction p;
    p.label = model.labels[win];
    for (size_t li = 0; li < scores.size(); ++li)
        if (li != win && scores[li] == best) p.tie = true;
    return p;
}

// ---------------------------------------------------------------------------
// Serialization via the shared checkpoint container.
// ---------------------------------------------------------------------------

inline void save_svm(const LinearOVRModel& model, const std::string& path) {
    ckpt::Writer w(path);
    w.magic_header(PayloadType::Svm);
    w.u32(static_cast<uint32_t>(model.labels.size()));
    for (const std::string& l : model.labels) w.str(l);
    w.u32(static_cast<uint32_t>(model.vocab.tokens.size()));
    for (int32_t tok : model.vocab.tokens) w.u32(static_cast<uint32_t>(tok));
    w.u32(static_cast<uint32_t>(model.vocab.min_df));
    w.f32(model.cfg.lambda);
    w.u32(static_cast<uint32_t>(model.cfg.epochs));
    w.u64(model.cfg.seed);
    const int64_t dim = model.vocab.size();
    w.u32(2);  // tensor count: weights, bias
    Tensor wt = Tensor::zeros({static_cast<int64_t>(model.labels.size()), std::max<int64_t>(dim, 1)});
    for (size_t li = 0; li < model.labels.size(); ++li)
        for (int64_t j = 0; j < dim; ++j)
            wt.mut_data()[li * static_cast<size_t>(std::max<int64_t>(dim, 1)) +
                          static_cast<size_t>(j)] = model.weights[li][static_cast<size_t>(j)];
    w.tensor("weights", wt);
    Tensor bt = Tensor::zeros({static_cast<int64_t>(model.labels.size())});
    for (size_t li = 0; li < model.labels.size(); ++li) bt.mut_data()[li] = model.bias[li];
    w.tensor("bias", bt);
    w.finish();
}

inline LinearOVRModel load_svm(const std::string& path) {
    ckpt::Reader r(path);
    const PayloadType type = r.magic_header();
    if (type != PayloadType::Svm)
        throw DataError("checkpoint " + path + " holds a " + payload_name(type) +
                        " payload, expected svm");
    LinearOVRModel model;
    const uint32_t n_labels = r.u32();
    for (uint32_t i = 0; i < n_labels; ++i) model.labels.push_back(r.str());
    const uint32_t n_vocab = r.u32();
    for (uint32_t i = 0; i < n_vocab; ++i) {
        const int32_t tok = static_cast<int32_t>(r.u32());
        model.vocab.index[tok] = static_cast<int32_t>(model.vocab.tokens.size());
        model.vocab.tokens.push_back(tok);
    }
    model.vocab.min_df = static_cast<int>(r.u32());
    model.cfg.lambda = r.f32();
    model.cfg.epochs = static_cast<int>(r.u32());
    model.cfg.seed = r.u64();
    const uint32_t count = r.u32();
    if (count != 2) throw IntegrityError("svm checkpoint " + path + " has unexpected layout");
    const Tensor wt = r.tensor("weights");
    const Tensor bt = r.tensor("bias");
    r.expect_eof();
    const int64_t dim = model.vocab.size();
    const int64_t stored = wt.dim(1);
    model.weights.assign(n_labels, std::vector<float>(static_cast<size_t>(dim), 0.0f));
    for (uint32_t li = 0; li < n_labels; ++li)
        for (int64_t j = 0; j < dim; ++j)
            model.weights[li][static_cast<size_t>(j)] =
                wt.data()[li * static_cast<size_t>(stored) + static_cast<size_t>(j)];
    model.bias.assign(n_labels, 0.0f);
    for (uint32_t li = 0; li < n_labels; ++li) model.bias[li] = bt.data()[li];
    return model;
}

}  // namespace prodapt
