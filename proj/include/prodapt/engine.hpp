#pragma once

// Fused inference: one shared frozen backbone with N language branches
// attached. The input is replicated at the first layer, the branch streams
// run through shared-weight batched ops, and the document is classified by
// the argmin of per-branch LM losses.
//
// The sequential mode evaluates branches strictly one at a time and is the
// correctness oracle for the fused path. With simulate_reload it also
// re-deserializes the complete model (backbone + branch checkpoint,
// checksums verified) before every branch evaluation, modeling a serving
// setup that loads and unloads one full language model per step.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "prodapt/adapters.hpp"
#include "prodapt/checkpoint.hpp"
#include "prodapt/common.hpp"
#include "prodapt/forward.hpp"
#include "prodapt/model.hpp"

namespace prodapt {

struct LabelLoss {
    std::string label;
    float loss = 0.0f;
};

struct InferenceResult {
    std::vector<LabelLoss> losses;  // branch insertion order
    std::string predicted;
    float margin = 0.0f;  // runner-up loss minus winning loss; 0 when N == 1
    bool tie = false;
    double wall_ms = 0.0;  // loss computation only, tokenization excluded
};

// Argmin with first-inserted tie-break; exact-equality ties are flagged.
inline InferenceResult pick_argmin(const std::vector<LabelLoss>& losses) {
    if (losses.empty()) throw ContractError("classification requires at least one branch loss");
    size_t win = 0;
    for (size_t i = 1; i < losses.size(); ++i)
        if (losses[i].loss < losses[win].loss) win = i;
    InferenceResult r;
    r.losses = losses;
    r.predicted = losses[win].label;
    float runner = std::numeric_limits<float>::infinity();
    for (size_t i = 0; i < losses.size(); ++i) {
        if (i == win) continue;
        runner = std::min(runner, losses[i].loss);
        if (losses[i].loss == losses[win].loss) r.tie = true;
    }
    r.margin = losses.size() > 1 ? runner - losses[win].loss : 0.0f;
    return r;
}

struct BranchSlot {
    L1Branch branch;
    std::string source_path;     // empty for in-memory assembly
    uint64_t file_checksum = 0;  // of the checkpoint file, when backed by one
};

class FusedModel {
public:
    FusedModel(std::shared_ptr<const Backbone> backbone, std::vector<BranchSlot> slots)
        : bb_(std::move(backbone)), slots_(std::move(slots)) {
        if (!bb_) throw ContractError("fused model requires a backbone");
        if (slots_.empty()) throw ContractError("fused model requires at least one branch");
        std::set<std::string> seen;
        for (const BranchSlot& s : slots_) {
            if (!seen.insert(s.branch.label).second)
                throw ContractError("duplicate branch label '" + s.branch.label + "'");
            check_branch_compat(*bb_, s.branch);
        }
        Fnv64 h;
        uint64_t bh = backbone_hash(*bb_);
        h.update_value(bh);
        for (const BranchSlot& s : slots_) {
            h.update(s.branch.label.data(), s.branch.label.size());
            h.update_value(static_cast<uint32_t>(s.branch.config.architecture));
            h.update_value(static_cast<uint32_t>(s.branch.config.reduction_factor));
        }
        config_checksum_ = h.digest();
    }

    const Backbone& backbone() const { return *bb_; }
    size_t branch_count() const { return slots_.size(); }
    const std::vector<BranchSlot>& slots() const { return slots_; }
    uint64_t config_checksum() const { return config_checksum_; }

    const std::string& backbone_path() const { return backbone_path_; }
    void set_backbone_path(std::string p, uint64_t checksum) {
        backbone_path_ = std::move(p);
        backbone_checksum_ = checksum;
    }
    uint64_t backbone_checksum() const { return backbone_checksum_; }

private:
    std::shared_ptr<const Backbone> bb_;
    std::vector<BranchSlot> slots_;
    uint64_t config_checksum_ = 0;
    std::string backbone_path_;
    uint64_t backbone_checksum_ = 0;
};

// ---------------------------------------------------------------------------
// Loss computation
// ---------------------------------------------------------------------------

// All branch losses for one document, computed with the input replicated
// over the shared backbone. threads > 1 splits the branches across workers;
// the per-branch arithmetic is unaffected either way.
inline std::vector<LabelLoss> fused_losses(const FusedModel& fm, const TokenSequence& tokens,
                                           int threads = 1) {
    const Backbone& bb = fm.backbone();
    const size_t n = fm.branch_count();
    std::vector<float> losses(n);
    if (threads > 1 && n > 1) {
        const int workers = static_cast<int>(std::min<size_t>(static_cast<size_t>(threads), n));
        const size_t chunk = (n + static_cast<size_t>(workers) - 1) / static_cast<size_t>(workers);
        parallel_for(workers, workers, [&](int64_t w) {
            const size_t lo = static_cast<size_t>(w) * chunk;
            const size_t hi = std::min(n, lo + chunk);
            if (lo >= hi) return;
            std::vector<const L1Branch*> branches;
            for (size_t i = lo; i < hi; ++i) branches.push_back(&fm.slots()[i].branch);
            const std::vector<float> part = multi_doc_losses(bb, tokens, branches);
            for (size_t i = lo; i < hi; ++i) losses[i] = part[i - lo];
        });
    } else {
        std::vector<const L1Branch*> branches;
        branches.reserve(n);
        for (const BranchSlot& s : fm.slots()) branches.push_back(&s.branch);
        losses = multi_doc_losses(bb, tokens, branches);
    }
    std::vector<LabelLoss> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i)
        out.push_back(LabelLoss{fm.slots()[i].branch.label, losses[i]});
    return out;
}

// Branches evaluated strictly one at a time. With simulate_reload each
// branch's complete model is loaded and unloaded around its evaluation: the
// checkpoint checksums are re-verified and one single-branch model is
// assembled from disk exactly the way bundle assembly does it.
inline std::vector<LabelLoss> sequential_losses(const FusedModel& fm, const TokenSequence& tokens,
                                                bool simulate_reload = false) {
    const size_t n = fm.branch_count();
    std::vector<LabelLoss> out;
    out.reserve(n);
    WindowEvaluator resident_eval(fm.backbone(), 1);
    for (size_t i = 0; i < n; ++i) {
        const BranchSlot& slot = fm.slots()[i];
        float loss;
        if (simulate_reload) {
            if (fm.backbone_path().empty() || slot.source_path.empty())
                throw DataError("reload mode requires a checkpoint-backed bundle; branch '" +
                                slot.branch.label + "' has no source file");
            if (file_checksum(fm.backbone_path()) != fm.backbone_checksum())
                throw IntegrityError("backbone checksum mismatch on reload: " +
                                     fm.backbone_path());
            if (file_checksum(slot.source_path) != slot.file_checksum)
                throw IntegrityError("branch checksum mismatch on reload: " + slot.source_path);
            auto fresh_bb = std::make_shared<const Backbone>(load_backbone(fm.backbone_path()));
            BranchSlot fresh;
            fresh.branch = load_branch(slot.source_path, *fresh_bb);
            fresh.source_path = slot.source_path;
            fresh.file_checksum = slot.file_checksum;
            std::vector<BranchSlot> one_slot;
            one_slot.push_back(std::move(fresh));
            FusedModel one(fresh_bb, std::move(one_slot));
            loss = fused_losses(one, tokens)[0].loss;
        } else {
            loss = doc_lm_loss(fm.backbone(), tokens, &slot.branch, &resident_eval);
        }
        out.push_back(LabelLoss{slot.branch.label, loss});
    }
    return out;
}

inline InferenceResult classify(const FusedModel& fm, const TokenSequence& tokens,
                                int threads = 1) {
    Stopwatch sw;
    const std::vector<LabelLoss> losses = fused_losses(fm, tokens, threads);
    InferenceResult r = pick_argmin(losses);
    r.wall_ms = sw.elapsed_ms();
    return r;
}

inline std::vector<InferenceResult> classify_batch(const FusedModel& fm,
                                                   const std::vector<TokenSequence>& docs,
                                                   int threads = 1) {
    if (docs.empty()) throw ContractError("classify_batch requires a non-empty document list");
    std::vector<InferenceResult> out;
    out.reserve(docs.size());
    for (const TokenSequence& d : docs) out.push_back(classify(fm, d, threads));
    return out;
}

// ---------------------------------------------------------------------------
// Bundle manifest: a text file binding one backbone checkpoint to N branch
// checkpoints with checksums. Assembly refuses checksum mismatches.
//
//   prodapt-bundle v1
//   backbone <path> <fnv64>
//   branch <label> <path> <fnv64>
// ---------------------------------------------------------------------------

struct BundleManifest {
    std::string backbone_path;
    uint64_t backbone_checksum = 0;
    struct Entry {
        std::string label;
        std::string path;
        uint64_t checksum = 0;
    };
    std::vector<Entry> branches;
};

inline void write_manifest(const BundleManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open manifest for writing: " + path);
    out << "prodapt-bundle v1\n";
    out << "backbone " << m.backbone_path << " " << hex_u64(m.backbone_checksum) << "\n";
    for (const auto& e : m.branches)
        out << "branch " << e.label << " " << e.path << " " << hex_u64(e.checksum) << "\n";
    if (!out) throw DataError("write failed for manifest: " + path);
}

inline BundleManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest: " + path);
    BundleManifest m;
    std::string line;
    size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        if (!header_seen) {
            std::string tag, ver;
            ss >> tag >> ver;
            if (tag != "prodapt-bundle" || ver != "v1")
                throw DataError("manifest " + path + " has an unrecognized header");
            header_seen = true;
            continue;
        }
        std::string kind;
        ss >> kind;
        if (kind == "backbone") {
            std::string p, sum;
            ss >> p >> sum;
            if (p.empty() || !parse_hex_u64(sum, m.backbone_checksum))
                throw DataError("malformed backbone line " + std::to_string(line_no) + " in " +
                                path);
            m.backbone_path = p;
        } else if (kind == "branch") {
            BundleManifest::Entry e;
            std::string sum;
            ss >> e.label >> e.path >> sum;
            if (e.label.empty() || e.path.empty() || !parse_hex_u64(sum, e.checksum))
                throw DataError("malformed branch line " + std::to_string(line_no) + " in " +
                                path);
            m.branches.push_back(std::move(e));
        } else {
            throw DataError("unknown manifest entry '" + kind + "' at line " +
                            std::to_string(line_no) + " in " + path);
        }
    }
    if (m.backbone_path.empty()) throw DataError("manifest " + path + " names no backbone");
    if (m.branches.empty()) throw DataError("manifest " + path + " names no branches");
    return m;
}

// Builds a manifest from checkpoint files, computing checksums. Paths are
// stored relative to the manifest's directory when possible.
inline BundleManifest build_manifest(const std::string& backbone_path,
                                     const std::vector<std::string>& branch_paths,
                                     const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const fs::path base = fs::path(manifest_path).parent_path();
    auto relativize = [&](const std::string& p) {
        std::error_code ec;
        const fs::path rel = fs::relative(p, base.empty() ? "." : base, ec);
        return ec || rel.empty() ? p : rel.string();
    };
    BundleManifest m;
    m.backbone_path = relativize(backbone_path);
    m.backbone_checksum = file_checksum(backbone_path);
    for (const std::string& bp : branch_paths) {
        ckpt::Reader r(bp);
        if (r.magic_header() != PayloadType::Branch)
            throw DataError(bp + " is not a branch checkpoint");
        const std::string label = r.str();
        m.branches.push_back({label, relativize(bp), file_checksum(bp)});
    }
    return m;
}

// Loads a manifest, verifies every checksum and assembles the fused model.
inline FusedModel load_bundle(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    const BundleManifest m = read_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    auto resolve = [&](const std::string& p) {
        const fs::path fp(p);
        return fp.is_absolute() ? p : (base / fp).string();
    };
    const std::string bb_path = resolve(m.backbone_path);
    if (file_checksum(bb_path) != m.backbone_checksum)
        throw IntegrityError("backbone checkpoint " + bb_path +
                             " does not match the manifest checksum; refusing to assemble");
    auto bb = std::make_shared<Backbone>(load_backbone(bb_path));
    std::vector<BranchSlot> slots;
    for (const auto& e : m.branches) {
        const std::string bp = resolve(e.path);
        if (file_checksum(bp) != e.checksum)
            throw IntegrityError("branch checkpoint " + bp +
                                 " does not match the manifest checksum; refusing to assemble");
        BranchSlot slot;
        slot.branch = load_branch(bp, *bb);
        if (slot.branch.label != e.label)
            throw DataError("manifest labels branch '" + e.label + "' but " + bp + " holds '" +
                            slot.branch.label + "'");
        slot.source_path = bp;
        slot.file_checksum = e.checksum;
        slots.push_back(std::move(slot));
    }
    FusedModel fm(std::move(bb), std::move(slots));
    fm.set_backbone_path(bb_path, m.backbone_checksum);
    return fm;
}

}  // namespace prodapt
