#pragma once

// Decoder-only transformer skeleton: configuration, frozen backbone weights,
// initialization and parameter accounting. The forward pass lives in
// forward.hpp.

#include <cstdint>
#include <string>
#include <vector>

#include "prodapt/common.hpp"
#include "prodapt/tensor.hpp"

namespace prodapt {

// Byte-level vocabulary: 256 byte values plus begin/end markers.
inline constexpr int32_t kByteVocab = 256;
inline constexpr int32_t kBosId = 256;
inline constexpr int32_t kEosId = 257;
inline constexpr int32_t kVocabSize = 258;
inline constexpr int32_t kIgnoreIndex = -1;
// Padding positions feed the end marker as input; their targets carry
// kIgnoreIndex so they never enter the loss.
inline constexpr int32_t kPadInputId = kEosId;

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ffn = 256;
    int vocab_size = kVocabSize;
    int max_seq_len = 128;
    GeluKind gelu = GeluKind::Tanh;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1)
            throw ContractError("model config fields must be positive");
        if (d_model % n_heads != 0)
            throw ContractError("d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
        if (max_seq_len < 2) throw ContractError("max_seq_len must be at least 2");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w_fc, b_fc, w_proj, b_proj;
};

// Frozen transformer weights. Every tensor is created with
// requires_grad = false and stays that way; only adapter branches train.
struct Backbone {
    ModelConfig cfg;
    Tensor tok_emb;  // [vocab x d_model]
    Tensor pos_emb;  // [max_seq_len x d_model]
    std::vector<LayerWeights> layers;
    Tensor lnf_g, lnf_b;
    bool tied_head = true;
    // With a tied head this is a cached transpose of tok_emb ([d x vocab]);
    // it is derived, so it is excluded from counts, hashes and checkpoints.
    Tensor lm_head;

    void rebuild_tied_head() {
        if (tied_head) lm_head = transpose2d(tok_emb);
    }

    // Canonical (name, tensor) listing; order defines hash and file layout.
    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            const LayerWeights& lw = layers[l];
            fn(p + "ln1_g", lw.ln1_g);
            fn(p + "ln1_b", lw.ln1_b);
            fn(p + "attn_wq", lw.wq);
            fn(p + "attn_bq", lw.bq);
            fn(p + "attn_wk", lw.wk);
            fn(p + "attn_bk", lw.bk);
            fn(p + "attn_wv", lw.wv);
            fn(p + "attn_bv", lw.bv);
            fn(p + "attn_wo", lw.wo);
            fn(p + "attn_bo", lw.bo);
            fn(p + "ln2_g", lw.ln2_g);
            fn(p + "ln2_b", lw.ln2_b);
            fn(p + "ffn_w_in", lw.w_fc);
            fn(p + "ffn_b_in", lw.b_fc);
            fn(p + "ffn_w_out", lw.w_proj);
            fn(p + "ffn_b_out", lw.b_proj);
        }
        fn("lnf_g", lnf_g);
        fn("lnf_b", lnf_b);
        if (!tied_head) fn("lm_head", lm_head);
    }
};

struct ParamCounts {
    int64_t total = 0;
    int64_t trainable = 0;
};

inline ParamCounts count_parameters(const Backbone& bb) {
    ParamCounts c;
    bb.for_each_param([&](const std::string&, const Tensor& t) {
        c.total += t.numel();
        if (t.requires_grad()) c.trainable += t.numel();
    });
    return c;
}

// Frozen-hash over the config and every parameter byte in canonical order.
// Stable across any adapter training run by construction check.
inline uint64_t backbone_hash(const Backbone& bb) {
    Fnv64 h;
    h.update_value(bb.cfg.n_layers);
    h.update_value(bb.cfg.d_model);
    h.update_value(bb.cfg.n_heads);
    h.update_value(bb.cfg.d_ffn);
    h.update_value(bb.cfg.vocab_size);
    h.update_value(bb.cfg.max_seq_len);
    h.update_value(static_cast<uint32_t>(bb.cfg.gelu));
    h.update_value(static_cast<uint32_t>(bb.tied_head ? 1 : 0));
    bb.for_each_param([&](const std::string& name, const Tensor& t) {
        h.update(name.data(), name.size());
        h.update(t.data(), static_cast<size_t>(t.numel()) * 4);
    });
    return h.digest();
}

// GPT-2 style initialization: N(0, 0.02) weights, residual output
// projections scaled down by sqrt(2 * n_layers), zero biases, unit gains.
inline Backbone init_backbone(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Backbone bb;
    bb.cfg = cfg;
    Rng rng(derive_seed(seed, "backbone"));
    const int64_t d = cfg.d_model;
    const int64_t v = cfg.vocab_size;
    const int64_t f = cfg.d_ffn;
    const float std_w = 0.02f;
    const float std_res = 0.02f / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
    bb.tok_emb = Tensor::randn({v, d}, rng, 0.0f, std_w);
    bb.pos_emb = Tensor::randn({cfg.max_seq_len, d}, rng, 0.0f, 0.01f);
    bb.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lw : bb.layers) {
        lw.ln1_g = Tensor::full({d}, 1.0f);
        lw.ln1_b = Tensor::zeros({d});
        lw.wq = Tensor::randn({d, d}, rng, 0.0f, std_w);
        lw.bq = Tensor::zeros({d});
        lw.wk = Tensor::randn({d, d}, rng, 0.0f, std_w);
        lw.bk = Tensor::zeros({d});
        lw.wv = Tensor::randn({d, d}, rng, 0.0f, std_w);
        lw.bv = Tensor::zeros({d});
        lw.wo = Tensor::randn({d, d}, rng, 0.0f, std_res);
        lw.bo = Tensor::zeros({d});
        lw.ln2_g = Tensor::full({d}, 1.0f);
        lw.ln2_b = Tensor::zeros({d});
        lw.w_fc = Tensor::randn({d, f}, rng, 0.0f, std_w);
        lw.b_fc = Tensor::zeros({f});
        lw.w_proj = Tensor::randn({f, d}, rng, 0.0f, std_res);
        lw.b_proj = Tensor::zeros({d});
    }
    bb.lnf_g = Tensor::full({d}, 1.0f);
    bb.lnf_b = Tensor::zeros({d});
    bb.tied_head = true;
    bb.rebuild_tied_head();
    return bb;
}

// Token ids bound for a model: values in [0, vocab), length-checked at use.
struct TokenSequence {
    std::vector<int32_t> ids;

    size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
};

}  // namespace prodapt
