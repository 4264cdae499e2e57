#pragma once

// Binary checkpoint container. Little-endian layout:
//
//   magic "PDPT" | u32 version | u32 payload_type | payload header |
//   u32 tensor_count | tensors
//
// Each tensor: u32 name_len | name bytes | u32 ndim | u64 dims... |
// f32 data. Tensor order is canonical per payload, so save -> load -> save
// reproduces the file byte for byte.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "prodapt/adapters.hpp"
#include "prodapt/common.hpp"
#include "prodapt/model.hpp"
#include "prodapt/tensor.hpp"

namespace prodapt {

inline constexpr char kMagic[4] = {'P', 'D', 'P', 'T'};
inline constexpr uint32_t kFormatVersion = 1;

enum class PayloadType : uint32_t { Backbone = 1, Branch = 2, Svm = 3 };

inline const char* payload_name(PayloadType t) {
    switch (t) {
        case PayloadType::Backbone: return "backbone";
        case PayloadType::Branch: return "branch";
        case PayloadType::Svm: return "svm";
    }
    return "?";
}

namespace ckpt {

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw DataError("cannot open checkpoint for writing: " + path);
    }

    void magic_header(PayloadType type) {
        out_.write(kMagic, 4);
        u32(kFormatVersion);
        u32(static_cast<uint32_t>(type));
    }

    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }

    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }

    void tensor(const std::string& name, const Tensor& t) {
        str(name);
        u32(static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) u64(static_cast<uint64_t>(t.dim(i)));
        raw(t.data(), static_cast<size_t>(t.numel()) * 4);
    }

    void finish() {
        out_.flush();
        if (!out_) throw DataError("write failed for checkpoint: " + path_);
    }

private:
    void raw(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    std::string path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw DataError("cannot open checkpoint: " + path);
    }

    PayloadType magic_header() {
        char m[4];
        raw(m, 4);
        if (std::memcmp(m, kMagic, 4) != 0)
            throw IntegrityError("bad magic bytes in " + path_ + " (not a PDPT checkpoint)");
        const uint32_t version = u32();
        if (version != kFormatVersion)
            throw DataError("checkpoint " + path_ + " has format version " +
                            std::to_string(version) + ", expected " +
                            std::to_string(kFormatVersion));
        const uint32_t t = u32();
        if (t < 1 || t > 3) throw IntegrityError("unknown payload type in " + path_);
        return static_cast<PayloadType>(t);
    }

    uint32_t u32() {
        uint32_t v;
        raw(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        raw(&v, 8);
        return v;
    }
    float f32() {
        float v;
        raw(&v, 4);
        return v;
    }

    std::string str() {
        const uint32_t n = u32();
        if (n > (1u << 20)) throw IntegrityError("implausible string length in " + path_);
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

    // Reads the next tensor and checks its name against the expected one.
    Tensor tensor(const std::string& expected_name) {
        const std::string name = str();
        if (name != expected_name)
            throw IntegrityError("checkpoint " + path_ + ": expected tensor '" + expected_name +
                                 "', found '" + name + "'");
        const uint32_t nd = u32();
        if (nd > 8) throw IntegrityError("implausible tensor rank in " + path_);
        std::vector<int64_t> shape(nd);
        int64_t numel = 1;
        for (uint32_t i = 0; i < nd; ++i) {
            shape[i] = static_cast<int64_t>(u64());
            if (shape[i] <= 0 || shape[i] > (1ll << 32))
                throw IntegrityError("implausible tensor dimension in " + path_);
            numel *= shape[i];
        }
        std::vector<float> data(static_cast<size_t>(numel));
        raw(data.data(), static_cast<size_t>(numel) * 4);
        return Tensor::from_data(std::move(shape), std::move(data));
    }

    void expect_eof() {
        char c;
        in_.read(&c, 1);
        if (!in_.eof()) throw IntegrityError("trailing bytes after payload in " + path_);
    }

private:
    void raw(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n)
            throw IntegrityError("truncated checkpoint: " + path_);
    }

    std::string path_;
    std::ifstream in_;
};

inline void write_model_config(Writer& w, const ModelConfig& c) {
    w.u32(static_cast<uint32_t>(c.n_layers));
    w.u32(static_cast<uint32_t>(c.d_model));
    w.u32(static_cast<uint32_t>(c.n_heads));
    w.u32(static_cast<uint32_t>(c.d_ffn));
    w.u32(static_cast<uint32_t>(c.vocab_size));
    w.u32(static_cast<uint32_t>(c.max_seq_len));
    w.u32(static_cast<uint32_t>(c.gelu));
}

inline ModelConfig read_model_config(Reader& r) {
    ModelConfig c;
    c.n_layers = static_cast<int>(r.u32());
    c.d_model = static_cast<int>(r.u32());
    c.n_heads = static_cast<int>(r.u32());
    c.d_ffn = static_cast<int>(r.u32());
    c.vocab_size = static_cast<int>(r.u32());
    c.max_seq_len = static_cast<int>(r.u32());
    c.gelu = static_cast<GeluKind>(r.u32());
    c.validate();
    return c;
}

}  // namespace ckpt

// ---------------------------------------------------------------------------
// Backbone checkpoints
// ---------------------------------------------------------------------------

inline void save_backbone(const Backbone& bb, const std::string& path) {
    ckpt::Writer w(path);
    w.magic_header(PayloadType::Backbone);
    ckpt::write_model_config(w, bb.cfg);
    w.u32(bb.tied_head ? 1 : 0);
    uint32_t count = 0;
    bb.for_each_param([&](const std::string&, const Tensor&) { ++count; });
    w.u32(count);
    bb.for_each_param([&](const std::string& name, const Tensor& t) { w.tensor(name, t); });
    w.finish();
}

inline Backbone load_backbone(const std::string& path) {
    ckpt::Reader r(path);
    const PayloadType type = r.magic_header();
    if (type != PayloadType::Backbone)
        throw DataError("checkpoint " + path + " holds a " + payload_name(type) +
                        " payload, expected backbone");
    Backbone bb;
    bb.cfg = ckpt::read_model_config(r);
    bb.tied_head = r.u32() != 0;
    const uint32_t count = r.u32();
    bb.layers.resize(static_cast<size_t>(bb.cfg.n_layers));
    uint32_t seen = 0;
    // Reuse the canonical ordering to drive reads.
    auto read_into = [&](const std::string& name, Tensor& dst) {
        dst = r.tensor(name);
        ++seen;
    };
    read_into("tok_emb", bb.tok_emb);
    read_into("pos_emb", bb.pos_emb);
    for (size_t l = 0; l < bb.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerWeights& lw = bb.layers[l];
        read_into(p + "ln1_g", lw.ln1_g);
        read_into(p + "ln1_b", lw.ln1_b);
        read_into(p + "attn_wq", lw.wq);
        read_into(p + "attn_bq", lw.bq);
        read_into(p + "attn_wk", lw.wk);
        read_into(p + "attn_bk", lw.bk);
        read_into(p + "attn_wv", lw.wv);
        read_into(p + "attn_bv", lw.bv);
        read_into(p + "attn_wo", lw.wo);
        read_into(p + "attn_bo", lw.bo);
        read_into(p + "ln2_g", lw.ln2_g);
        read_into(p + "ln2_b", lw.ln2_b);
        read_into(p + "ffn_w_in", lw.w_fc);
        read_into(p + "ffn_b_in", lw.b_fc);
        read_into(p + "ffn_w_out", lw.w_proj);
        read_into(p + "ffn_b_out", lw.b_proj);
    }
    read_into("lnf_g", bb.lnf_g);
    read_into("lnf_b", bb.lnf_b);
    if (!bb.tied_head) read_into("lm_head", bb.lm_head);
    if (seen != count)
        throw IntegrityError("checkpoint " + path + " declares " + std::to_string(count) +
                             " tensors, read " + std::to_string(seen));
    r.expect_eof();
    bb.rebuild_tied_head();
    return bb;
}

// ---------------------------------------------------------------------------
// Branch checkpoints. The file holds only the branch payload; backbone
// weights are never written here.
// ---------------------------------------------------------------------------

inline void save_branch(const L1Branch& br, const std::string& path,
                        const ModelConfig& backbone_cfg) {
    ckpt::Writer w(path);
    w.magic_header(PayloadType::Branch);
    w.str(br.label);
    w.u32(static_cast<uint32_t>(br.config.architecture));
    w.u32(static_cast<uint32_t>(br.config.reduction_factor));
    w.u32(static_cast<uint32_t>(br.config.nonlinearity));
    w.u32(static_cast<uint32_t>(br.config.head_mode));
    ckpt::write_model_config(w, backbone_cfg);
    w.u32(br.meta.trained_epochs);
    w.f32(br.meta.best_val_loss);
    w.u64(br.meta.created_at);
    uint32_t count = 0;
    br.for_each_param([&](const std::string&, const Tensor&) { ++count; });
    w.u32(count);
    br.for_each_param([&](const std::string& name, const Tensor& t) { w.tensor(name, t); });
    w.finish();
}

// Shape-level compatibility without pulling in forward.hpp.
inline void check_branch_compat_shapes(const Backbone& bb, const L1Branch& br) {
    const int64_t d = bb.cfg.d_model;
    if (static_cast<int>(br.sites.size()) != bb.cfg.n_layers)
        throw ContractError("branch '" + br.label + "' layer count mismatch");
    for (const auto& ls : br.sites)
        for (const AdapterSite& s : ls)
            if (s.down_w.dim(0) != d || s.up_w.dim(1) != d)
                throw ContractError("branch '" + br.label + "' adapter width mismatch");
    if (br.head.dim(0) != d || br.head.dim(1) != bb.cfg.vocab_size)
        throw ContractError("branch '" + br.label + "' head shape mismatch");
}

// Loads a branch and validates it against the session's backbone; when
// `expected` is given, the stored adapter configuration must match it.
inline L1Branch load_branch(const std::string& path, const Backbone& bb,
                            const AdapterConfig* expected = nullptr) {
    ckpt::Reader r(path);
    const PayloadType type = r.magic_header();
    if (type != PayloadType::Branch)
        throw DataError("checkpoint " + path + " holds a " + payload_name(type) +
                        " payload, expected branch");
    L1Branch br;
    br.label = r.str();
    br.config.architecture = static_cast<AdapterArch>(r.u32());
    br.config.reduction_factor = static_cast<int>(r.u32());
    br.config.nonlinearity = static_cast<GeluKind>(r.u32());
    br.config.head_mode = static_cast<HeadMode>(r.u32());
    const ModelConfig stored_cfg = ckpt::read_model_config(r);
    if (stored_cfg != bb.cfg)
        throw DataError("branch " + path + " was saved for a different model configuration (" +
                        std::to_string(stored_cfg.n_layers) + " layers, d_model " +
                        std::to_string(stored_cfg.d_model) + ", vocab " +
                        std::to_string(stored_cfg.vocab_size) + ")");
    if (expected && !(br.config == *expected))
        throw DataError("branch " + path + " was saved under the " +
                        adapter_arch_name(br.config.architecture) + " configuration (reduction " +
                        std::to_string(br.config.reduction_factor) +
                        "), which does not match this session's " +
                        adapter_arch_name(expected->architecture) + " configuration (reduction " +
                        std::to_string(expected->reduction_factor) + ")");
    br.meta.trained_epochs = r.u32();
    br.meta.best_val_loss = r.f32();
    br.meta.created_at = r.u64();
    const uint32_t count = r.u32();
    const int spl = sites_per_layer(br.config.architecture);
    br.sites.resize(static_cast<size_t>(bb.cfg.n_layers));
    uint32_t seen = 0;
    for (size_t l = 0; l < br.sites.size(); ++l) {
        br.sites[l].resize(static_cast<size_t>(spl));
        for (int s = 0; s < spl; ++s) {
            const std::string p = "layer" + std::to_string(l) + ".site" + std::to_string(s) + ".";
            AdapterSite& site = br.sites[l][static_cast<size_t>(s)];
            site.down_w = r.tensor(p + "down_w");
            site.down_b = r.tensor(p + "down_b");
            site.up_w = r.tensor(p + "up_w");
            site.up_b = r.tensor(p + "up_b");
            site.down_w.set_requires_grad(true);
            site.down_b.set_requires_grad(true);
            site.up_w.set_requires_grad(true);
            site.up_b.set_requires_grad(true);
            seen += 4;
        }
    }
    br.head = r.tensor("head");
    br.head.set_requires_grad(true);
    ++seen;
    if (seen != count)
        throw IntegrityError("checkpoint " + path + " declares " + std::to_string(count) +
                             " tensors, read " + std::to_string(seen));
    r.expect_eof();
    check_branch_compat_shapes(bb, br);
    return br;
}

}  // namespace prodapt
