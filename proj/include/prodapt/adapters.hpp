#pragma once

// Bottleneck adapters and per-language branches. A branch carries the
// adapter weights for every injection site plus an untied copy of the LM
// head; it is the only trainable payload over the frozen backbone.

#include <cstdint>
#include <string>
#include <vector>

#include "prodapt/common.hpp"
#include "prodapt/model.hpp"
#include "prodapt/tensor.hpp"

namespace prodapt {

enum class AdapterArch : uint32_t {
    Houlsby = 0,   // two sites per layer: after attention, after FFN
    Pfeiffer = 1,  // one site per layer: after FFN
};

inline const char* adapter_arch_name(AdapterArch a) {
    return a == AdapterArch::Houlsby ? "houlsby" : "pfeiffer";
}

inline int sites_per_layer(AdapterArch a) { return a == AdapterArch::Houlsby ? 2 : 1; }

enum class HeadMode : uint32_t { UntiedLmHead = 0 };

struct AdapterConfig {
    AdapterArch architecture = AdapterArch::Houlsby;
    int reduction_factor = 16;
    GeluKind nonlinearity = GeluKind::Tanh;
    HeadMode head_mode = HeadMode::UntiedLmHead;

    int bottleneck(int d_model) const { return d_model / reduction_factor; }

    void validate(const ModelConfig& mc) const {
        if (reduction_factor < 1) throw ContractError("adapter reduction_factor must be positive");
        if (mc.d_model % reduction_factor != 0)
            throw ContractError("d_model " + std::to_string(mc.d_model) +
                                " not divisible by adapter reduction_factor " +
                                std::to_string(reduction_factor));
    }

    bool operator==(const AdapterConfig&) const = default;
};

// One injection site: residual bottleneck transform
//   h + up(gelu(down(h) + down_bias)) + up_bias.
struct AdapterSite {
    Tensor down_w;  // [d_model x bottleneck]
    Tensor down_b;  // [bottleneck]
    Tensor up_w;    // [bottleneck x d_model]
    Tensor up_b;    // [d_model]
};

struct BranchMeta {
    uint32_t trained_epochs = 0;
    float best_val_loss = 0.0f;
    uint64_t created_at = 0;  // unix seconds; 0 when not stamped
};

struct L1Branch {
    std::string label;
    AdapterConfig config;
    // sites[layer][site]; Houlsby: {after-attention, after-FFN},
    // Pfeiffer: {after-FFN}.
    std::vector<std::vector<AdapterSite>> sites;
    Tensor head;  // [d_model x vocab], untied copy of the backbone LM head
    BranchMeta meta;

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        for (size_t l = 0; l < sites.size(); ++l)
            for (size_t s = 0; s < sites[l].size(); ++s) {
                const std::string p =
                    "layer" + std::to_string(l) + ".site" + std::to_string(s) + ".";
                fn(p + "down_w", sites[l][s].down_w);
                fn(p + "down_b", sites[l][s].down_b);
                fn(p + "up_w", sites[l][s].up_w);
                fn(p + "up_b", sites[l][s].up_b);
            }
        fn("head", head);
    }

    L1Branch clone() const {
        L1Branch c;
        c.label = label;
        c.config = config;
        c.meta = meta;
        c.sites.resize(sites.size());
        for (size_t l = 0; l < sites.size(); ++l)
            for (const AdapterSite& s : sites[l])
                c.sites[l].push_back(AdapterSite{s.down_w.clone(), s.down_b.clone(),
                                                 s.up_w.clone(), s.up_b.clone()});
        c.head = head.clone();
        return c;
    }
};

inline ParamCounts count_parameters(const L1Branch& br) {
    ParamCounts c;
    br.for_each_param([&](const std::string&, const Tensor& t) {
        c.total += t.numel();
        if (t.requires_grad()) c.trainable += t.numel();
    });
    return c;
}

// Closed-form trainable count: n_layers * sites * (2*d*b + b + d) + d * vocab.
inline int64_t branch_param_count(const ModelConfig& mc, const AdapterConfig& ac) {
    const int64_t d = mc.d_model;
    const int64_t b = ac.bottleneck(mc.d_model);
    const int64_t sites = static_cast<int64_t>(mc.n_layers) * sites_per_layer(ac.architecture);
    return sites * (2 * d * b + b + d) + d * static_cast<int64_t>(mc.vocab_size);
}

// The residual bottleneck transform at one site. With a zero up-projection
// and zero up-bias this is the identity map, which is how fresh branches
// leave the backbone untouched.
inline Tensor adapter_apply(const Tensor& h, const AdapterSite& site,
                            GeluKind nonlinearity = GeluKind::Tanh, Tape* tape = nullptr) {
    require_matrix(h, "adapter_apply");
    if (h.dim(1) != site.down_w.dim(0))
        throw ContractError("adapter input width " + h.shape_string() +
                            " does not match down projection " + site.down_w.shape_string());
    Tensor z = add_row_bias(matmul(h, site.down_w, tape), site.down_b, tape);
    Tensor a = gelu(z, nonlinearity, tape);
    Tensor u = add_row_bias(matmul(a, site.up_w, tape), site.up_b, tape);
    return add(h, u, tape);
}

// Fresh branch: small random down projections (std 1e-3), zero up
// projections and biases -- every site starts as an exact identity -- and a
// head copied from the backbone LM head.
inline L1Branch init_branch(const AdapterConfig& ac, const Backbone& bb, const std::string& label,
                            uint64_t seed = 0) {
    ac.validate(bb.cfg);
    const int64_t d = bb.cfg.d_model;
    const int64_t b = ac.bottleneck(bb.cfg.d_model);
    Rng rng(derive_seed(derive_seed(seed, "branch"), label));
    L1Branch br;
    br.label = label;
    br.config = ac;
    const int spl = sites_per_layer(ac.architecture);
    br.sites.resize(static_cast<size_t>(bb.cfg.n_layers));
    for (auto& layer_sites : br.sites) {
        layer_sites.resize(static_cast<size_t>(spl));
        for (AdapterSite& s : layer_sites) {
            s.down_w = Tensor::randn({d, b}, rng, 0.0f, 1e-3f, /*requires_grad=*/true);
            s.down_b = Tensor::zeros({b}, /*requires_grad=*/true);
            s.up_w = Tensor::zeros({b, d}, /*requires_grad=*/true);
            s.up_b = Tensor::zeros({d}, /*requires_grad=*/true);
        }
    }
    br.head = bb.lm_head.clone();
    br.head.set_requires_grad(true);
    return br;
}

}  // namespace prodapt
