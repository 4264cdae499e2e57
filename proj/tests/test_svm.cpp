// Unigram SVM baseline: featurization, Pegasos training, prediction
// semantics, symmetry properties and serialization.

#include <doctest.h>

#include <cstdio>

#include "prodapt/corpus.hpp"
#include "prodapt/svm.hpp"

using namespace prodapt;

namespace {

Vocabulary two_token_vocab() {
    Vocabulary v;
    v.min_df = 1;
    v.index[static_cast<int32_t>('a')] = 0;
    v.index[static_cast<int32_t>('b')] = 1;
    v.tokens = {static_cast<int32_t>('a'), static_cast<int32_t>('b')};
    return v;
}

// Linearly separable two-label corpus over disjoint alphabets.
std::vector<std::pair<std::string, std::string>> separable_corpus() {
    std::vector<std::pair<std::string, std::string>> docs;
    for (int i = 0; i < 12; ++i) {
        docs.emplace_back("aaa aab aba baa " + std::string(static_cast<size_t>(i % 3 + 1), 'a'), "alpha");
        docs.emplace_back("zzz zzy zyz yzz " + std::string(static_cast<size_t>(i % 3 + 1), 'z'), "zulu");
    }
    return docs;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/prodapt_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("featurize computes L2-normalized unigram counts") {
    const Vocabulary vocab = two_token_vocab();
    const SparseVec v = featurize(tokenize("aab"), vocab);
    REQUIRE(v.entries.size() == 2);
    CHECK_FALSE(v.degenerate);
    const float norm = std::sqrt(5.0f);
    CHECK(v.entries[0].first == 0);
    CHECK(v.entries[0].second == doctest::Approx(2.0f / norm));
    CHECK(v.entries[1].first == 1);
    CHECK(v.entries[1].second == doctest::Approx(1.0f / norm));
}

TEST_CASE("featurize flags all-OOV documents as degenerate zero vectors") {
    const Vocabulary vocab = two_token_vocab();
    const SparseVec v = featurize(tokenize("xyz"), vocab);
    CHECK(v.entries.empty());
    CHECK(v.degenerate);
}

TEST_CASE("featurize is invariant to token order") {
    const Vocabulary vocab = two_token_vocab();
    const SparseVec v1 = featurize(tokenize("aabbba"), vocab);
    const SparseVec v2 = featurize(tokenize("bbaaab"), vocab);
    REQUIRE(v1.entries.size() == v2.entries.size());
    for (size_t i = 0; i < v1.entries.size(); ++i) {
        CHECK(v1.entries[i].first == v2.entries[i].first);
        CHECK(v1.entries[i].second == v2.entries[i].second);
    }
}

TEST_CASE("vocabulary respects the document-frequency cutoff") {
    std::vector<TokenSequence> docs{tokenize("aa"), tokenize("ab"), tokenize("ac")};
    const Vocabulary v1 = Vocabulary::build(docs, 1);
    CHECK(v1.size() == 3);  // a, b, c
    const Vocabulary v2 = Vocabulary::build(docs, 2);
    CHECK(v2.size() == 1);  // only 'a' appears in two documents
    CHECK(v2.index.count(static_cast<int32_t>('a')) == 1);
}

TEST_CASE("pegasos separates a linearly separable corpus") {
    const auto corpus = separable_corpus();
    std::vector<TokenSequence> tokens;
    for (const auto& [text, label] : corpus) tokens.push_back(tokenize(text));
    const Vocabulary vocab = Vocabulary::build(tokens, 1);
    std::vector<SvmExample> data;
    for (size_t i = 0; i < corpus.size(); ++i)
        data.push_back(SvmExample{featurize(tokens[i], vocab), corpus[i].second});
    SvmConfig cfg;
    const LinearOVRModel model = train_svm(data, vocab, cfg);
    size_t correct = 0;
    for (size_t i = 0; i < corpus.size(); ++i)
        if (predict_svm(model, data[i].features).label == corpus[i].second) ++correct;
    CHECK(correct == corpus.size());
}

TEST_CASE("relabeling the data permutes the per-label weight vectors") {
    const auto corpus = separable_corpus();
    std::vector<TokenSequence> tokens;
    for (const auto& [text, label] : corpus) tokens.push_back(tokenize(text));
    const Vocabulary vocab = Vocabulary::build(tokens, 1);
    SvmConfig cfg;

    std::vector<SvmExample> data, swapped;
    for (size_t i = 0; i < corpus.size(); ++i) {
        const SparseVec f = featurize(tokens[i], vocab);
        data.push_back(SvmExample{f, corpus[i].second});
        swapped.push_back(SvmExample{f, corpus[i].second == "alpha" ? "zulu" : "alpha"});
    }
    const LinearOVRModel m1 = train_svm(data, vocab, cfg);
    const LinearOVRModel m2 = train_svm(swapped, vocab, cfg);
    auto weights_of = [](const LinearOVRModel& m, const std::string& label) {
        for (size_t i = 0; i < m.labels.size(); ++i)
            if (m.labels[i] == label) return m.weights[i];
        FAIL("label not found");
        return std::vector<float>{};
    };
    CHECK(weights_of(m1, "alpha") == weights_of(m2, "zulu"));
    CHECK(weights_of(m1, "zulu") == weights_of(m2, "alpha"));
}

TEST_CASE("a huge regularizer drives weights to zero and predictions to bias order") {
    const auto corpus = separable_corpus();
    std::vector<TokenSequence> tokens;
    for (const auto& [text, label] : corpus) tokens.push_back(tokenize(text));
    const Vocabulary vocab = Vocabulary::build(tokens, 1);
    std::vector<SvmExample> data;
    for (size_t i = 0; i < corpus.size(); ++i)
        data.push_back(SvmExample{featurize(tokens[i], vocab), corpus[i].second});
    SvmConfig cfg;
    cfg.lambda = 1e6f;
    const LinearOVRModel model = train_svm(data, vocab, cfg);
    for (const auto& w : model.weights)
        for (float x : w) CHECK(std::fabs(x) < 1e-3f);
    size_t bias_argmax = 0;
    for (size_t i = 1; i < model.bias.size(); ++i)
        if (model.bias[i] > model.bias[bias_argmax]) bias_argmax = i;
    const SvmPrediction p = predict_svm(model, data[0].features);
    CHECK(p.label == model.labels[bias_argmax]);
}

TEST_CASE("a zero vector is classified by bias alone") {
    LinearOVRModel model;
    model.labels = {"low", "high"};
    model.vocab = two_token_vocab();
    model.weights = {{1.0f, -1.0f}, {-1.0f, 1.0f}};
    model.bias = {0.25f, 0.75f};
    SparseVec zero;
    zero.degenerate = true;
    CHECK(predict_svm(model, zero).label == "high");
}

TEST_CASE("positive scaling of the input does not change the argmax with zero biases") {
    LinearOVRModel model;
    model.labels = {"p", "q", "r"};
    model.vocab = two_token_vocab();
    model.weights = {{0.9f, -0.2f}, {0.3f, 0.8f}, {-0.5f, 0.1f}};
    model.bias = {0.0f, 0.0f, 0.0f};
    Rng rng(150);
    for (int trial = 0; trial < 20; ++trial) {
        SparseVec v;
        v.entries = {{0, rng.next_float() - 0.5f}, {1, rng.next_float() - 0.5f}};
        SparseVec scaled = v;
        const float c = 0.1f + 5.0f * rng.next_float();
        for (auto& [idx, val] : scaled.entries) val *= c;
        CHECK(predict_svm(model, v).label == predict_svm(model, scaled).label);
    }
}

TEST_CASE("svm training requires at least two labels") {
    const Vocabulary vocab = two_token_vocab();
    std::vector<SvmExample> data{SvmExample{featurize(tokenize("ab"), vocab), "only"}};
    SvmConfig cfg;
    CHECK_THROWS_AS((void)train_svm(data, vocab, cfg), ContractError);
}

TEST_CASE("prediction rejects out-of-dimension features") {
    LinearOVRModel model;
    model.labels = {"a", "b"};
    model.vocab = two_token_vocab();
    model.weights = {{0.0f, 0.0f}, {0.0f, 0.0f}};
    model.bias = {0.0f, 0.0f};
    SparseVec bad;
    bad.entries = {{7, 1.0f}};
    CHECK_THROWS_AS((void)predict_svm(model, bad), ContractError);
}

TEST_CASE("svm training is deterministic under the seed") {
    const auto corpus = separable_corpus();
    std::vector<TokenSequence> tokens;
    for (const auto& [text, label] : corpus) tokens.push_back(tokenize(text));
    const Vocabulary vocab = Vocabulary::build(tokens, 1);
    std::vector<SvmExample> data;
    for (size_t i = 0; i < corpus.size(); ++i)
        data.push_back(SvmExample{featurize(tokens[i], vocab), corpus[i].second});
    SvmConfig cfg;
    const LinearOVRModel m1 = train_svm(data, vocab, cfg);
    const LinearOVRModel m2 = train_svm(data, vocab, cfg);
    CHECK(m1.weights == m2.weights);
    CHECK(m1.bias == m2.bias);
}

TEST_CASE("svm model round trips through the checkpoint container") {
    const auto corpus = separable_corpus();
    std::vector<TokenSequence> tokens;
    for (const auto& [text, label] : corpus) tokens.push_back(tokenize(text));
    const Vocabulary vocab = Vocabulary::build(tokens, 2);
    std::vector<SvmExample> data;
    for (size_t i = 0; i < corpus.size(); ++i)
        data.push_back(SvmExample{featurize(tokens[i], vocab), corpus[i].second});
    SvmConfig cfg;
    const LinearOVRModel model = train_svm(data, vocab, cfg);
    TempFile f("svm.pdpt");
    save_svm(model, f.path);
    const LinearOVRModel loaded = load_svm(f.path);
    CHECK(loaded.labels == model.labels);
    CHECK(loaded.weights == model.weights);
    CHECK(loaded.bias == model.bias);
    CHECK(loaded.vocab.tokens == model.vocab.tokens);
    for (size_t i = 0; i < data.size(); ++i) {
        const SparseVec v = featurize(tokens[i], loaded.vocab);
        CHECK(predict_svm(loaded, v).label == predict_svm(model, data[i].features).label);
    }
}
