#pragma once

// Transformer forward pass and LM loss.
//
// Everything runs through multi_forward, which evaluates N token streams
// over one shared backbone. The streams are stacked along a replication
// axis so backbone projections run as shared-weight batched matmuls;
// attention, adapters and heads are applied per stream. All kernels are
// row-wise with fixed reduction order, so a stream's result is bit-identical
// whether it runs alone or stacked with others. Uses:
//   - training batches: same branch, different windows
//   - fused inference: same window, different branches
//   - standalone eval:  N = 1

#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "prodapt/adapters.hpp"
#include "prodapt/common.hpp"
#include "prodapt/model.hpp"
#include "prodapt/tensor.hpp"

namespace prodapt {

inline void check_branch_compat(const Backbone& bb, const L1Branch& br) {
    const int64_t d = bb.cfg.d_model;
    if (static_cast<int>(br.sites.size()) != bb.cfg.n_layers)
        throw ContractError("branch '" + br.label + "' covers " +
                            std::to_string(br.sites.size()) + " layers, backbone has " +
                            std::to_string(bb.cfg.n_layers));
    for (const auto& layer_sites : br.sites) {
        if (static_cast<int>(layer_sites.size()) != sites_per_layer(br.config.architecture))
            throw ContractError("branch '" + br.label + "' site count does not match its " +
                                std::string(adapter_arch_name(br.config.architecture)) +
                                " configuration");
        for (const AdapterSite& s : layer_sites)
            if (s.down_w.dim(0) != d || s.up_w.dim(1) != d)
                throw ContractError("branch '" + br.label + "' adapter width " +
                                    s.down_w.shape_string() + " does not match d_model " +
                                    std::to_string(d));
    }
    if (br.head.dim(0) != d || br.head.dim(1) != bb.cfg.vocab_size)
        throw ContractError("branch '" + br.label + "' head " + br.head.shape_string() +
                            " does not match backbone [" + std::to_string(d) + "x" +
                            std::to_string(bb.cfg.vocab_size) + "]");
}

namespace detail {

// Additive causal mask: 0 on and below the diagonal, -inf above.
inline Tensor causal_mask(int64_t t) {
    Tensor m = Tensor::zeros({t, t});
    float* p = m.mut_data();
    const float ninf = -std::numeric_limits<float>::infinity();
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = i + 1; j < t; ++j) p[i * t + j] = ninf;
    return m;
}

enum class SiteRole { AfterAttention, AfterFfn };

// A branch's site index for a role; -1 when the architecture has no site
// there (Pfeiffer has no after-attention site).
inline int site_index(const L1Branch& br, SiteRole role) {
    if (br.config.architecture == AdapterArch::Houlsby)
        return role == SiteRole::AfterAttention ? 0 : 1;
    return role == SiteRole::AfterFfn ? 0 : -1;
}

// Applies one adapter role across all streams. When every stream uses the
// same weights (training batches) the stacked matrix goes through in one
// shot; otherwise each stream's rows are sliced out and transformed with its
// own branch.
inline Tensor apply_site(const Tensor& x, const std::vector<const L1Branch*>& branches,
                         size_t layer, SiteRole role, int64_t t, Tape* tape) {
    bool any = false, uniform = true;
    for (const L1Branch* b : branches) {
        if (b && site_index(*b, role) >= 0) any = true;
        if (b != branches[0]) uniform = false;
    }
    if (!any) return x;
    if (uniform) {
        const L1Branch* b = branches[0];
        const int si = site_index(*b, role);
        return adapter_apply(x, b->sites[layer][static_cast<size_t>(si)],
                             b->config.nonlinearity, tape);
    }
    std::vector<Tensor> rows;
    rows.reserve(branches.size());
    for (size_t s = 0; s < branches.size(); ++s) {
        Tensor xs = slice_rows(x, static_cast<int64_t>(s) * t, t, tape);
        const L1Branch* b = branches[s];
        const int si = b ? site_index(*b, role) : -1;
        rows.push_back(si >= 0 ? adapter_apply(xs, b->sites[layer][static_cast<size_t>(si)],
                                               b->config.nonlinearity, tape)
                               : xs);
    }
    return concat_rows(rows, tape);
}

}  // namespace detail

// Evaluates N streams of equal length T. Returns stacked logits
// [N*T x vocab]; stream s owns rows [s*T, (s+1)*T).
inline Tensor multi_forward(const Backbone& bb, const std::vector<std::span<const int32_t>>& ids,
                            const std::vector<const L1Branch*>& branches, Tape* tape = nullptr) {
    const ModelConfig& cfg = bb.cfg;
    const int64_t n = static_cast<int64_t>(ids.size());
    if (n == 0) throw ContractError("forward requires at least one stream");
    if (branches.size() != ids.size())
        throw ContractError("stream/branch count mismatch");
    const int64_t t = static_cast<int64_t>(ids[0].size());
    if (t < 1) throw ContractError("forward requires a non-empty token sequence");
    if (t > cfg.max_seq_len)
        throw ContractError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    for (const auto& s : ids)
        if (static_cast<int64_t>(s.size()) != t)
            throw ContractError("all streams must share one padded length");
    for (const L1Branch* b : branches)
        if (b) check_branch_compat(bb, *b);

    const int64_t d = cfg.d_model;
    const int64_t heads = cfg.n_heads;
    const int64_t dh = d / heads;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    // Token + position embeddings, stacked over streams.
    std::vector<int32_t> flat_ids(static_cast<size_t>(n * t));
    std::vector<int32_t> flat_pos(static_cast<size_t>(n * t));
    for (int64_t s = 0; s < n; ++s)
        for (int64_t i = 0; i < t; ++i) {
            flat_ids[static_cast<size_t>(s * t + i)] = ids[static_cast<size_t>(s)][static_cast<size_t>(i)];
            flat_pos[static_cast<size_t>(s * t + i)] = static_cast<int32_t>(i);
        }
    Tensor x = add(embedding_rows(bb.tok_emb, flat_ids, tape),
                   embedding_rows(bb.pos_emb, flat_pos, tape), tape);

    const Tensor mask = detail::causal_mask(t);

    for (size_t l = 0; l < bb.layers.size(); ++l) {
        const LayerWeights& lw = bb.layers[l];
        // Attention sublayer.
        Tensor xn = layernorm(x, lw.ln1_g, lw.ln1_b, 1e-5f, tape);
        Tensor q = add_row_bias(matmul(xn, lw.wq, tape), lw.bq, tape);
        Tensor k = add_row_bias(matmul(xn, lw.wk, tape), lw.bk, tape);
        Tensor v = add_row_bias(matmul(xn, lw.wv, tape), lw.bv, tape);
        std::vector<Tensor> ctx_streams;
        ctx_streams.reserve(static_cast<size_t>(n));
        for (int64_t s = 0; s < n; ++s) {
            Tensor qs = slice_rows(q, s * t, t, tape);
            Tensor ks = slice_rows(k, s * t, t, tape);
            Tensor vs = slice_rows(v, s * t, t, tape);
            std::vector<Tensor> head_ctx;
            head_ctx.reserve(static_cast<size_t>(heads));
            for (int64_t h = 0; h < heads; ++h) {
                Tensor qh = slice_cols(qs, h * dh, dh, tape);
                Tensor kh = slice_cols(ks, h * dh, dh, tape);
                Tensor vh = slice_cols(vs, h * dh, dh, tape);
                Tensor scores = scale(matmul(qh, transpose2d(kh, tape), tape), att_scale, tape);
                Tensor attn = softmax(add(scores, mask, tape), -1, tape);
                head_ctx.push_back(matmul(attn, vh, tape));
            }
            ctx_streams.push_back(concat_cols(head_ctx, tape));
        }
        Tensor ctx = n == 1 ? ctx_streams[0] : concat_rows(ctx_streams, tape);
        Tensor attn_out = add_row_bias(matmul(ctx, lw.wo, tape), lw.bo, tape);
        attn_out = detail::apply_site(attn_out, branches, l, detail::SiteRole::AfterAttention, t, tape);
        x = add(x, attn_out, tape);

        // FFN sublayer.
        Tensor xn2 = layernorm(x, lw.ln2_g, lw.ln2_b, 1e-5f, tape);
        Tensor f = add_row_bias(matmul(xn2, lw.w_fc, tape), lw.b_fc, tape);
        f = gelu(f, cfg.gelu, tape);
        f = add_row_bias(matmul(f, lw.w_proj, tape), lw.b_proj, tape);
        f = detail::apply_site(f, branches, l, detail::SiteRole::AfterFfn, t, tape);
        x = add(x, f, tape);
    }

    Tensor h = layernorm(x, bb.lnf_g, bb.lnf_b, 1e-5f, tape);

    // Output heads: shared backbone head, or each stream's branch head.
    bool uniform_head = true;
    for (const L1Branch* b : branches)
        if (b != branches[0]) uniform_head = false;
    if (uniform_head) {
        const Tensor& head = branches[0] ? branches[0]->head : bb.lm_head;
        return matmul(h, head, tape);
    }
    std::vector<Tensor> logit_rows;
    logit_rows.reserve(static_cast<size_t>(n));
    for (int64_t s = 0; s < n; ++s) {
        Tensor hs = slice_rows(h, s * t, t, tape);
        const Tensor& head = branches[static_cast<size_t>(s)]
                                 ? branches[static_cast<size_t>(s)]->head
                                 : bb.lm_head;
        logit_rows.push_back(matmul(hs, head, tape));
    }
    return concat_rows(logit_rows, tape);
}

// Single-stream wrapper: next-token logits [T x vocab].
inline Tensor forward(const Backbone& bb, const TokenSequence& tokens,
                      const L1Branch* branch = nullptr, Tape* tape = nullptr) {
    std::vector<std::span<const int32_t>> ids{std::span<const int32_t>(tokens.ids)};
    return multi_forward(bb, ids, {branch}, tape);
}

// Shifted next-token targets for one window: position i predicts ids[i+1];
// the last position has no pair and is ignored.
inline std::vector<int32_t> shifted_targets(std::span<const int32_t> ids) {
    std::vector<int32_t> tg(ids.size(), kIgnoreIndex);
    for (size_t i = 0; i + 1 < ids.size(); ++i) tg[i] = ids[i + 1];
    return tg;
}

// LM loss of a single window (length 2..max_seq_len): mean per-token
// cross-entropy of next-token prediction.
inline CeResult lm_loss_window(const Backbone& bb, std::span<const int32_t> ids,
                               const L1Branch* branch = nullptr, Tape* tape = nullptr) {
    if (ids.size() < 2)
        throw ContractError("lm_loss requires at least 2 tokens, got " +
                            std::to_string(ids.size()));
    std::vector<std::span<const int32_t>> streams{ids};
    Tensor logits = multi_forward(bb, streams, {branch}, tape);
    const std::vector<int32_t> tg = shifted_targets(ids);
    return cross_entropy(logits, tg, kIgnoreIndex, tape);
}

inline float lm_loss(const Backbone& bb, const TokenSequence& tokens,
                     const L1Branch* branch = nullptr) {
    return lm_loss_window(bb, tokens.ids, branch, nullptr).loss.item();
}

// Non-overlapping windows of at most max_len tokens. If the tail would be a
// single token (which has no next-token pair) one token is moved from the
// previous window so every window has length >= 2.
inline std::vector<std::pair<size_t, size_t>> doc_windows(size_t n_tokens, size_t max_len) {
    if (n_tokens < 2) throw ContractError("document must have at least 2 tokens");
    std::vector<std::pair<size_t, size_t>> w;
    size_t pos = 0;
    while (pos < n_tokens) {
        size_t len = std::min(max_len, n_tokens - pos);
        if (n_tokens - pos - len == 1) --len;  // leave at least 2 for the tail
        w.emplace_back(pos, len);
        pos += len;
    }
    return w;
}

// ---------------------------------------------------------------------------
// Tape-free evaluator. Runs the identical arithmetic to multi_forward on
// preallocated scratch buffers, which is what inference (standalone, fused
// and sequential) uses. Attention is computed over the causal prefix only;
// the masked entries of the tape path are exact zeros, so the two paths stay
// bit-identical.
// ---------------------------------------------------------------------------

class WindowEvaluator {
public:
    // Streams are processed in blocks of at most `stream_block` so the
    // batched activations stay cache-resident while each block still shares
    // one pass over the backbone weights.
    static constexpr int64_t kDefaultStreamBlock = 4;

    explicit WindowEvaluator(const Backbone& bb, int64_t stream_block = kDefaultStreamBlock)
        : bb_(bb), block_(std::max<int64_t>(1, stream_block)) {
        const int64_t d = bb.cfg.d_model;
        const int64_t t = bb.cfg.max_seq_len;
        const int64_t bt = block_ * t;
        for (auto* buf : {&x_, &xn_, &q_, &k_, &v_, &ctx_, &proj_, &f2_})
            buf->assign(static_cast<size_t>(bt * d), 0.0f);
        f1_.assign(static_cast<size_t>(bt * bb.cfg.d_ffn), 0.0f);
        emb_.assign(static_cast<size_t>(t * d), 0.0f);
        prefix_base_.assign(static_cast<size_t>(t * d), 0.0f);
        prefix_sub_.assign(static_cast<size_t>(t * d), 0.0f);
        z_.assign(static_cast<size_t>(t * d), 0.0f);
        a_.assign(static_cast<size_t>(t * d), 0.0f);
        u_.assign(static_cast<size_t>(t * d), 0.0f);
        kht_.assign(static_cast<size_t>(t * d / bb.cfg.n_heads * t), 0.0f);
        scores_.assign(static_cast<size_t>(t * t), 0.0f);
        logits_.assign(static_cast<size_t>(t * bb.cfg.vocab_size), 0.0f);
    }

    struct WindowLoss {
        float loss = 0.0f;
        int64_t kept = 0;
    };

    // Evaluates one window (2..max_seq_len tokens) for every stream; stream
    // s uses branches[s] (null = backbone only). The streams are identical
    // until the first adapter site, so that prefix is computed once and
    // replicated; from the divergence point on, streams run in cache-sized
    // blocks of shared-weight batched ops. Results land in `out`.
    void eval_window(std::span<const int32_t> window,
                     const std::vector<const L1Branch*>& branches,
                     std::vector<WindowLoss>& out) {
        const ModelConfig& cfg = bb_.cfg;
        const int64_t n = static_cast<int64_t>(branches.size());
        const int64_t t = static_cast<int64_t>(window.size());
        if (n < 1) throw ContractError("evaluator needs at least one stream");
        if (t < 2 || t > cfg.max_seq_len)
            throw ContractError("window length " + std::to_string(t) +
                                " outside [2, max_seq_len]");
        const int64_t d = cfg.d_model;
        const int64_t v = cfg.vocab_size;

        // Shared input embedding.
        for (int64_t i = 0; i < t; ++i) {
            const int32_t id = window[static_cast<size_t>(i)];
            if (id < 0 || id >= v)
                throw ContractError("token id " + std::to_string(id) + " out of range [0, " +
                                    std::to_string(v) + ")");
            kern::add_rows(bb_.tok_emb.data() + static_cast<int64_t>(id) * d,
                           bb_.pos_emb.data() + i * d, emb_.data() + i * d, d);
        }

        // Divergence point: the first role in layer 0 where any branch
        // injects an adapter. Everything before it is branch-independent.
        bool diverge_at_attn = false;
        for (const L1Branch* b : branches)
            if (b && detail::site_index(*b, detail::SiteRole::AfterAttention) >= 0)
                diverge_at_attn = true;

        // Layer-0 prefix, computed once for all streams.
        const LayerWeights& l0 = bb_.layers[0];
        const int64_t heads = cfg.n_heads;
        const int64_t dh = d / heads;
        const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
        std::memcpy(x_.data(), emb_.data(), static_cast<size_t>(t * d) * 4);
        for (int64_t r = 0; r < t; ++r)
            kern::layernorm_row(x_.data() + r * d, l0.ln1_g.data(), l0.ln1_b.data(),
                                xn_.data() + r * d, d, 1e-5f);
        project(xn_, l0.wq, l0.bq, q_, t, d, d);
        project(xn_, l0.wk, l0.bk, k_, t, d, d);
        project(xn_, l0.wv, l0.bv, v_, t, d, d);
        attention_stream(0, t, d, heads, dh, att_scale);
        project(ctx_, l0.wo, l0.bo, proj_, t, d, d);
        if (diverge_at_attn) {
            std::memcpy(prefix_base_.data(), x_.data(), static_cast<size_t>(t * d) * 4);
            std::memcpy(prefix_sub_.data(), proj_.data(), static_cast<size_t>(t * d) * 4);
        } else {
            // No branch touches the attention output; the prefix extends to
            // the layer-0 FFN output.
            for (int64_t i = 0; i < t * d; ++i)
                x_[static_cast<size_t>(i)] += proj_[static_cast<size_t>(i)];
            for (int64_t r = 0; r < t; ++r)
                kern::layernorm_row(x_.data() + r * d, l0.ln2_g.data(), l0.ln2_b.data(),
                                    xn_.data() + r * d, d, 1e-5f);
            const int64_t f = cfg.d_ffn;
            project(xn_, l0.w_fc, l0.b_fc, f1_, t, d, f);
            kern::gelu_buf(f1_.data(), f1_.data(), t * f, cfg.gelu);
            project(f1_, l0.w_proj, l0.b_proj, f2_, t, f, d);
            std::memcpy(prefix_base_.data(), x_.data(), static_cast<size_t>(t * d) * 4);
            std::memcpy(prefix_sub_.data(), f2_.data(), static_cast<size_t>(t * d) * 4);
        }

        out.assign(static_cast<size_t>(n), WindowLoss{});
        for (int64_t s0 = 0; s0 < n; s0 += block_) {
            const int64_t nb = std::min(block_, n - s0);
            std::vector<const L1Branch*> block_branches(
                branches.begin() + static_cast<size_t>(s0),
                branches.begin() + static_cast<size_t>(s0 + nb));
            eval_block(window, block_branches, t, diverge_at_attn, out,
                       static_cast<size_t>(s0));
        }
    }

private:
    // Continues a block of streams from the divergence point through the
    // rest of the network.
    void eval_block(std::span<const int32_t> window, const std::vector<const L1Branch*>& branches,
                    int64_t t, bool diverge_at_attn, std::vector<WindowLoss>& out,
                    size_t out_offset) {
        const ModelConfig& cfg = bb_.cfg;
        const int64_t n = static_cast<int64_t>(branches.size());
        const int64_t d = cfg.d_model;
        const int64_t heads = cfg.n_heads;
        const int64_t dh = d / heads;
        const int64_t v = cfg.vocab_size;
        const int64_t f = cfg.d_ffn;
        const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
        const int64_t nt = n * t;

        // Restore the shared prefix into every stream, then apply each
        // stream's layer-0 adapters.
        for (int64_t s = 0; s < n; ++s)
            std::memcpy(x_.data() + s * t * d, prefix_base_.data(),
                        static_cast<size_t>(t * d) * 4);
        if (diverge_at_attn) {
            for (int64_t s = 0; s < n; ++s)
                std::memcpy(proj_.data() + s * t * d, prefix_sub_.data(),
                            static_cast<size_t>(t * d) * 4);
            apply_adapters(branches, 0, detail::SiteRole::AfterAttention, t, d, proj_);
            for (int64_t i = 0; i < nt * d; ++i)
                x_[static_cast<size_t>(i)] += proj_[static_cast<size_t>(i)];
            // Layer-0 FFN sublayer.
            const LayerWeights& l0 = bb_.layers[0];
            for (int64_t r = 0; r < nt; ++r)
                kern::layernorm_row(x_.data() + r * d, l0.ln2_g.data(), l0.ln2_b.data(),
                                    xn_.data() + r * d, d, 1e-5f);
            project(xn_, l0.w_fc, l0.b_fc, f1_, nt, d, f);
            kern::gelu_buf(f1_.data(), f1_.data(), nt * f, cfg.gelu);
            project(f1_, l0.w_proj, l0.b_proj, f2_, nt, f, d);
            apply_adapters(branches, 0, detail::SiteRole::AfterFfn, t, d, f2_);
            for (int64_t i = 0; i < nt * d; ++i)
                x_[static_cast<size_t>(i)] += f2_[static_cast<size_t>(i)];
        } else {
            for (int64_t s = 0; s < n; ++s)
                std::memcpy(f2_.data() + s * t * d, prefix_sub_.data(),
                            static_cast<size_t>(t * d) * 4);
            apply_adapters(branches, 0, detail::SiteRole::AfterFfn, t, d, f2_);
            for (int64_t i = 0; i < nt * d; ++i)
                x_[static_cast<size_t>(i)] += f2_[static_cast<size_t>(i)];
        }

        // Remaining layers, fully per-stream.
        for (size_t l = 1; l < bb_.layers.size(); ++l) {
            const LayerWeights& lw = bb_.layers[l];
            for (int64_t r = 0; r < nt; ++r)
                kern::layernorm_row(x_.data() + r * d, lw.ln1_g.data(), lw.ln1_b.data(),
                                    xn_.data() + r * d, d, 1e-5f);
            project(xn_, lw.wq, lw.bq, q_, nt, d, d);
            project(xn_, lw.wk, lw.bk, k_, nt, d, d);
            project(xn_, lw.wv, lw.bv, v_, nt, d, d);
            for (int64_t s = 0; s < n; ++s) attention_stream(s, t, d, heads, dh, att_scale);
            project(ctx_, lw.wo, lw.bo, proj_, nt, d, d);
            apply_adapters(branches, l, detail::SiteRole::AfterAttention, t, d, proj_);
            for (int64_t i = 0; i < nt * d; ++i)
                x_[static_cast<size_t>(i)] += proj_[static_cast<size_t>(i)];

            for (int64_t r = 0; r < nt; ++r)
                kern::layernorm_row(x_.data() + r * d, lw.ln2_g.data(), lw.ln2_b.data(),
                                    xn_.data() + r * d, d, 1e-5f);
            project(xn_, lw.w_fc, lw.b_fc, f1_, nt, d, f);
            kern::gelu_buf(f1_.data(), f1_.data(), nt * f, cfg.gelu);
            project(f1_, lw.w_proj, lw.b_proj, f2_, nt, f, d);
            apply_adapters(branches, l, detail::SiteRole::AfterFfn, t, d, f2_);
            for (int64_t i = 0; i < nt * d; ++i)
                x_[static_cast<size_t>(i)] += f2_[static_cast<size_t>(i)];
        }

        for (int64_t r = 0; r < nt; ++r)
            kern::layernorm_row(x_.data() + r * d, bb_.lnf_g.data(), bb_.lnf_b.data(),
                                xn_.data() + r * d, d, 1e-5f);

        // Per-stream head and loss.
        for (int64_t s = 0; s < n; ++s) {
            const L1Branch* br = branches[static_cast<size_t>(s)];
            const Tensor& head = br ? br->head : bb_.lm_head;
            std::fill(logits_.begin(), logits_.begin() + static_cast<long>(t * v), 0.0f);
            kern::mm_acc(xn_.data() + s * t * d, head.data(), logits_.data(), t, d, v);
            double total = 0.0;
            int64_t kept = 0;
            for (int64_t i = 0; i + 1 < t; ++i) {
                const int32_t target = window[static_cast<size_t>(i + 1)];
                total += static_cast<double>(kern::ce_row(logits_.data() + i * v, v, target));
                ++kept;
            }
            WindowLoss& wl = out[out_offset + static_cast<size_t>(s)];
            wl.loss = kept > 0 ? static_cast<float>(total / static_cast<double>(kept)) : 0.0f;
            wl.kept = kept;
        }
    }

    void project(const std::vector<float>& in, const Tensor& w, const Tensor& b,
                 std::vector<float>& out, int64_t rows, int64_t k, int64_t ncols) {
        std::fill(out.begin(), out.begin() + static_cast<long>(rows * ncols), 0.0f);
        kern::mm_acc(in.data(), w.data(), out.data(), rows, k, ncols);
        const float* pb = b.data();
        for (int64_t i = 0; i < rows; ++i) {
            float* row = out.data() + i * ncols;
            for (int64_t j = 0; j < ncols; ++j) row[j] += pb[j];
        }
    }

    // Causal attention for one stream: scores over the prefix only. The
    // tape path's masked entries are exact zeros, so skipping them keeps
    // results bit-identical.
    void attention_stream(int64_t s, int64_t t, int64_t d, int64_t heads, int64_t dh,
                          float att_scale) {
        const float* q = q_.data() + s * t * d;
        const float* k = k_.data() + s * t * d;
        const float* v = v_.data() + s * t * d;
        float* ctx = ctx_.data() + s * t * d;
        for (int64_t h = 0; h < heads; ++h) {
            // K head transposed: kht[kk * t + j] = k[j * d + h*dh + kk].
            for (int64_t j = 0; j < t; ++j)
                for (int64_t kk = 0; kk < dh; ++kk)
                    kht_[static_cast<size_t>(kk * t + j)] = k[j * d + h * dh + kk];
            for (int64_t i = 0; i < t; ++i) {
                const int64_t lim = i + 1;
                float* srow = scores_.data() + i * t;
                std::fill(srow, srow + lim, 0.0f);
                const float* qrow = q + i * d + h * dh;
                for (int64_t kk = 0; kk < dh; ++kk) {
                    const float qv = qrow[kk];
                    const float* krow = kht_.data() + kk * t;
                    for (int64_t j = 0; j < lim; ++j) srow[j] += qv * krow[j];
                }
                for (int64_t j = 0; j < lim; ++j) srow[j] *= att_scale;
                kern::softmax_row(srow, srow, lim);
                float* crow = ctx + i * d + h * dh;
                std::fill(crow, crow + dh, 0.0f);
                for (int64_t j = 0; j < lim; ++j) {
                    const float av = srow[j];
                    const float* vrow = v + j * d + h * dh;
                    for (int64_t kk = 0; kk < dh; ++kk) crow[kk] += av * vrow[kk];
                }
            }
        }
    }

    void apply_adapters(const std::vector<const L1Branch*>& branches, size_t layer,
                        detail::SiteRole role, int64_t t, int64_t d, std::vector<float>& inout) {
        for (size_t s = 0; s < branches.size(); ++s) {
            const L1Branch* br = branches[s];
            if (!br) continue;
            const int si = detail::site_index(*br, role);
            if (si < 0) continue;
            const AdapterSite& site = br->sites[layer][static_cast<size_t>(si)];
            const int64_t btl = site.down_w.dim(1);
            float* h = inout.data() + static_cast<int64_t>(s) * t * d;
            std::fill(z_.begin(), z_.begin() + static_cast<long>(t * btl), 0.0f);
            kern::mm_acc(h, site.down_w.data(), z_.data(), t, d, btl);
            const float* bd = site.down_b.data();
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < btl; ++j) z_[static_cast<size_t>(i * btl + j)] += bd[j];
            kern::gelu_buf(z_.data(), a_.data(), t * btl, br->config.nonlinearity);
            std::fill(u_.begin(), u_.begin() + static_cast<long>(t * d), 0.0f);
            kern::mm_acc(a_.data(), site.up_w.data(), u_.data(), t, btl, d);
            const float* bu = site.up_b.data();
            // h + (u + up_bias), rounded in that order.
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < d; ++j)
                    h[i * d + j] += u_[static_cast<size_t>(i * d + j)] + bu[j];
        }
    }

    const Backbone& bb_;
    int64_t block_;
    std::vector<float> x_, xn_, q_, k_, v_, ctx_, proj_, f2_, f1_, emb_, prefix_base_,
        prefix_sub_, z_, a_, u_, kht_, scores_, logits_;
};

// Document losses for any number of branches at once: token-count-weighted
// mean over windows, per stream.
inline std::vector<float> multi_doc_losses(const Backbone& bb, const TokenSequence& tokens,
                                           const std::vector<const L1Branch*>& branches,
                                           WindowEvaluator* eval = nullptr) {
    const auto windows = doc_windows(tokens.ids.size(), static_cast<size_t>(bb.cfg.max_seq_len));
    std::unique_ptr<WindowEvaluator> own;
    if (!eval) {
        own = std::make_unique<WindowEvaluator>(bb);
        eval = own.get();
    }
    std::vector<double> weighted(branches.size(), 0.0);
    std::vector<int64_t> kept(branches.size(), 0);
    std::vector<WindowEvaluator::WindowLoss> wl;
    for (const auto& [off, len] : windows) {
        eval->eval_window(std::span<const int32_t>(tokens.ids).subspan(off, len), branches, wl);
        for (size_t s = 0; s < branches.size(); ++s) {
            weighted[s] += static_cast<double>(wl[s].loss) * static_cast<double>(wl[s].kept);
            kept[s] += wl[s].kept;
        }
    }
    std::vector<float> out(branches.size());
    for (size_t s = 0; s < branches.size(); ++s)
        out[s] = static_cast<float>(weighted[s] / static_cast<double>(kept[s]));
    return out;
}

// Document LM loss: token-count-weighted mean over windows.
inline float doc_lm_loss(const Backbone& bb, const TokenSequence& tokens,
                         const L1Branch* branch = nullptr, WindowEvaluator* eval = nullptr) {
    if (branch) check_branch_compat(bb, *branch);
    return multi_doc_losses(bb, tokens, {branch}, eval)[0];
}

}  // namespace prodapt
