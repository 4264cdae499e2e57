#pragma once

// Corpus handling: byte-level tokenization, line-delimited JSON ingestion,
// stratified fold plans and the synthetic Markov-chain corpus generator.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "prodapt/common.hpp"
#include "prodapt/model.hpp"

namespace prodapt {

// ---------------------------------------------------------------------------
// Byte-level tokenizer: every UTF-8 byte is one token, wrapped in
// begin/end markers. Lossless and deterministic.
// ---------------------------------------------------------------------------

inline TokenSequence tokenize(const std::string& text) {
    TokenSequence seq;
    seq.ids.reserve(text.size() + 2);
    seq.ids.push_back(kBosId);
    for (unsigned char c : text) seq.ids.push_back(static_cast<int32_t>(c));
    seq.ids.push_back(kEosId);
    return seq;
}

inline std::string detokenize(const TokenSequence& seq) {
    std::string out;
    out.reserve(seq.ids.size());
    for (int32_t id : seq.ids) {
        if (id >= 0 && id < kByteVocab) out.push_back(static_cast<char>(id));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corpus records and ingestion
// ---------------------------------------------------------------------------

struct CorpusRecord {
    std::string id;
    std::string text;
    std::string label;
    std::string prompt_id;     // optional
    std::string proficiency;   // optional
};

struct RejectedLine {
    size_t line_no = 0;
    std::string reason;
};

struct IngestResult {
    std::vector<CorpusRecord> records;
    std::vector<RejectedLine> rejects;
};

// Reads line-delimited JSON records with fields text and label (id,
// prompt_id, proficiency optional; ids are generated from the line number
// when absent). Malformed lines land in the rejects report; duplicate ids
// and an empty result are hard errors.
inline IngestResult ingest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    IngestResult res;
    std::set<std::string> seen_ids;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded() || !j.is_object()) {
            res.rejects.push_back({line_no, "not a JSON object"});
            continue;
        }
        if (!j.contains("text") || !j["text"].is_string()) {
            res.rejects.push_back({line_no, "missing string field 'text'"});
            continue;
        }
        if (!j.contains("label") || !j["label"].is_string()) {
            res.rejects.push_back({line_no, "missing string field 'label'"});
            continue;
        }
        CorpusRecord rec;
        rec.text = j["text"].get<std::string>();
        rec.label = j["label"].get<std::string>();
        if (rec.text.empty()) {
            res.rejects.push_back({line_no, "empty text"});
            continue;
        }
        if (rec.label.empty()) {
            res.rejects.push_back({line_no, "empty label"});
            continue;
        }
        if (j.contains("id") && j["id"].is_string() && !j["id"].get<std::string>().empty())
            rec.id = j["id"].get<std::string>();
        else
            rec.id = "rec-" + std::to_string(line_no);
        if (j.contains("prompt_id") && j["prompt_id"].is_string())
            rec.prompt_id = j["prompt_id"].get<std::string>();
        if (j.contains("proficiency") && j["proficiency"].is_string())
            rec.proficiency = j["proficiency"].get<std::string>();
        if (!seen_ids.insert(rec.id).second)
            throw DataError("duplicate record id '" + rec.id + "' at line " +
                            std::to_string(line_no) + " of " + path);
        res.records.push_back(std::move(rec));
    }
    if (res.records.empty())
        throw DataError("no valid records in " + path + " (" +
                        std::to_string(res.rejects.size()) + " rejected lines)");
    return res;
}

inline void write_corpus(const std::vector<CorpusRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open corpus file for writing: " + path);
    for (const CorpusRecord& r : records) {
        nlohmann::json j;
        j["id"] = r.id;
        j["label"] = r.label;
        j["text"] = r.text;
        if (!r.prompt_id.empty()) j["prompt_id"] = r.prompt_id;
        if (!r.proficiency.empty()) j["proficiency"] = r.proficiency;
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("write failed for corpus file: " + path);
}

inline std::vector<std::string> label_set(const std::vector<CorpusRecord>& records) {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.label);
    return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------
// Stratified k-fold plans
// ---------------------------------------------------------------------------

struct FoldPlan {
    int k = 10;
    uint64_t seed = 0;
    std::vector<int> assignment;  // fold index per record, parallel to the corpus

    std::vector<size_t> fold_indices(int fold) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < assignment.size(); ++i)
            if (assignment[i] == fold) out.push_back(i);
        return out;
    }

    std::vector<size_t> complement_indices(int fold) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < assignment.size(); ++i)
            if (assignment[i] != fold) out.push_back(i);
        return out;
    }
};

// Stratified partition: within each label the (seeded) shuffled records are
// dealt round-robin, so per-label fold counts differ by at most one.
inline FoldPlan make_folds(const std::vector<CorpusRecord>& records, int k, uint64_t seed) {
    if (k < 2) throw ContractError("fold count must be at least 2");
    std::map<std::string, std::vector<size_t>> by_label;
    for (size_t i = 0; i < records.size(); ++i) by_label[records[i].label].push_back(i);
    for (const auto& [label, idx] : by_label)
        if (static_cast<int>(idx.size()) < k)
            throw ContractError("label '" + label + "' has only " + std::to_string(idx.size()) +
                                " records, fewer than k=" + std::to_string(k));
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.assignment.assign(records.size(), -1);
    for (auto& [label, idx] : by_label) {
        Rng rng(derive_seed(derive_seed(seed, "folds"), label));
        rng.shuffle(idx);
        for (size_t i = 0; i < idx.size(); ++i)
            plan.assignment[idx[i]] = static_cast<int>(i % static_cast<size_t>(k));
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Synthetic corpus: one order-1 Markov chain over a byte alphabet per
// source. Sources must have distinct unigram (stationary) distributions.
// ---------------------------------------------------------------------------

struct SyntheticSource {
    std::string label;
    std::vector<unsigned char> alphabet;
    std::vector<double> transition;  // row-stochastic [A x A]
    int len_min = 40;                // document length in bytes, uniform
    int len_max = 160;
    uint64_t seed = 0;

    int alphabet_size() const { return static_cast<int>(alphabet.size()); }

    void validate() const {
        const size_t a = alphabet.size();
        if (a < 2) throw ContractError("synthetic source needs an alphabet of at least 2 symbols");
        if (transition.size() != a * a)
            throw ContractError("transition matrix size does not match alphabet");
        for (size_t i = 0; i < a; ++i) {
            double s = 0.0;
            for (size_t j = 0; j < a; ++j) {
                const double p = transition[i * a + j];
                if (p < 0.0) throw ContractError("negative transition probability");
                s += p;
            }
            if (std::fabs(s - 1.0) > 1e-9)
                throw ContractError("transition row " + std::to_string(i) + " sums to " +
                                    std::to_string(s) + ", not 1");
        }
        if (len_min < 2 || len_max < len_min)
            throw ContractError("bad document length range");
    }
};

// Stationary distribution by power iteration.
inline std::vector<double> stationary_distribution(const std::vector<double>& transition,
                                                   size_t a, int iters = 2000) {
    std::vector<double> pi(a, 1.0 / static_cast<double>(a));
    std::vector<double> next(a, 0.0);
    for (int it = 0; it < iters; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (size_t i = 0; i < a; ++i) {
            const double p = pi[i];
            for (size_t j = 0; j < a; ++j) next[j] += p * transition[i * a + j];
        }
        double diff = 0.0;
        for (size_t j = 0; j < a; ++j) diff += std::fabs(next[j] - pi[j]);
        pi.swap(next);
        if (diff < 1e-14) break;
    }
    return pi;
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) s += std::fabs(p[i] - q[i]);
    return 0.5 * s;
}

// Pairwise source distance: total variation between stationary unigram
// distributions.
inline double source_distance(const SyntheticSource& a, const SyntheticSource& b) {
    const auto pa = stationary_distribution(a.transition, a.alphabet.size());
    const auto pb = stationary_distribution(b.transition, b.alphabet.size());
    return total_variation(pa, pb);
}

// Default alphabet: lowercase letters plus space, so documents read as text.
inline std::vector<unsigned char> default_alphabet() {
    std::vector<unsigned char> a;
    for (char c = 'a'; c <= 'z'; ++c) a.push_back(static_cast<unsigned char>(c));
    a.push_back(' ');
    return a;
}

// Builds n sources whose stationary distributions are pairwise at least
// tv_floor apart. Each source concentrates mass on its own random subset of
// the alphabet, which makes the floor easy to hit; resamples a bounded
// number of times before giving up.
inline std::vector<SyntheticSource> make_sources(int n, uint64_t seed, double tv_floor = 0.3,
                                                 int len_min = 40, int len_max = 160) {
    if (n < 2) throw ContractError("need at least 2 synthetic sources");
    const std::vector<unsigned char> alphabet = default_alphabet();
    const size_t a = alphabet.size();
    std::vector<SyntheticSource> sources;
    for (int attempt = 0; attempt < 64; ++attempt) {
        sources.clear();
        Rng rng(derive_seed(derive_seed(seed, "sources"), static_cast<uint64_t>(attempt)));
        for (int s = 0; s < n; ++s) {
            // A random "preferred" half of the alphabet gets ~85% of the mass.
            std::vector<size_t> perm(a);
            for (size_t i = 0; i < a; ++i) perm[i] = i;
            rng.shuffle(perm);
            std::vector<double> pref(a, 0.0);
            const size_t half = a / 2;
            double norm = 0.0;
            for (size_t i = 0; i < a; ++i) {
                const double base = i < half ? 1.0 : 0.06;
                pref[perm[i]] = base * (0.5 + rng.next_double());
                norm += pref[perm[i]];
            }
            for (double& p : pref) p /= norm;
            SyntheticSource src;
            src.label = "src" + std::string(1, static_cast<char>('A' + s));
            src.alphabet = alphabet;
            src.len_min = len_min;
            src.len_max = len_max;
            src.seed = derive_seed(seed, src.label);
            src.transition.assign(a * a, 0.0);
            for (size_t i = 0; i < a; ++i) {
                double rownorm = 0.0;
                for (size_t j = 0; j < a; ++j) {
                    // Mix of the source preference and row-specific noise
                    // keeps transitions (not just unigrams) source-specific.
                    const double v = 0.7 * pref[j] + 0.3 * rng.next_double() / static_cast<double>(a);
                    src.transition[i * a + j] = v;
                    rownorm += v;
                }
                for (size_t j = 0; j < a; ++j) src.transition[i * a + j] /= rownorm;
            }
            src.validate();
            sources.push_back(std::move(src));
        }
        bool ok = true;
        for (size_t i = 0; i < sources.size() && ok; ++i)
            for (size_t j = i + 1; j < sources.size() && ok; ++j)
                if (source_distance(sources[i], sources[j]) < tv_floor) ok = false;
        if (ok) return sources;
    }
    throw ContractError("could not construct " + std::to_string(n) +
                        " sources with pairwise TV distance >= " + std::to_string(tv_floor));
}

inline void check_source_distinctness(const std::vector<SyntheticSource>& sources,
                                      double tv_floor) {
    for (size_t i = 0; i < sources.size(); ++i)
        for (size_t j = i + 1; j < sources.size(); ++j) {
            const double d = source_distance(sources[i], sources[j]);
            if (d < tv_floor)
                throw ContractError("sources '" + sources[i].label + "' and '" +
                                    sources[j].label + "' are TV distance " + std::to_string(d) +
                                    " apart, below the floor " + std::to_string(tv_floor));
        }
}

// Samples one document from a source's Markov chain.
inline std::string sample_document(const SyntheticSource& src, Rng& rng) {
    const size_t a = src.alphabet.size();
    const auto pi = stationary_distribution(src.transition, a);
    const int len = static_cast<int>(rng.next_in(src.len_min, src.len_max));
    std::string doc(static_cast<size_t>(len), '\0');
    // Initial symbol from the stationary distribution.
    auto sample_from = [&](const double* dist) {
        const double u = rng.next_double();
        double acc = 0.0;
        for (size_t j = 0; j < a; ++j) {
            acc += dist[j];
            if (u < acc) return j;
        }
        return a - 1;
    };
    size_t state = sample_from(pi.data());
    doc[0] = static_cast<char>(src.alphabet[state]);
    for (int i = 1; i < len; ++i) {
        state = sample_from(src.transition.data() + state * a);
        doc[static_cast<size_t>(i)] = static_cast<char>(src.alphabet[state]);
    }
    return doc;
}

// Deterministic corpus generation: docs_per_source documents per source.
inline std::vector<CorpusRecord> gen_synthetic(const std::vector<SyntheticSource>& sources,
                                               int docs_per_source, uint64_t seed,
                                               double tv_floor = 0.3) {
    if (sources.size() < 2) throw ContractError("need at least 2 synthetic sources");
    if (docs_per_source < 1) throw ContractError("docs_per_source must be positive");
    for (const auto& s : sources) s.validate();
    check_source_distinctness(sources, tv_floor);
    std::vector<CorpusRecord> records;
    records.reserve(sources.size() * static_cast<size_t>(docs_per_source));
    for (const SyntheticSource& src : sources) {
        Rng rng(derive_seed(derive_seed(seed, "gen"), src.label));
        for (int d = 0; d < docs_per_source; ++d) {
            CorpusRecord rec;
            rec.id = src.label + "-" + std::to_string(d);
            rec.label = src.label;
            rec.text = sample_document(src, rng);
            records.push_back(std::move(rec));
        }
    }
    return records;
}

}  // namespace prodapt
