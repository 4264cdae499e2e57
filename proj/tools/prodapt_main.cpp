// prodapt: per-language adapter branches over one shared frozen transformer
// backbone, classified by least LM loss. Subcommands cover the whole
// pipeline: synthetic corpus generation, branch/SVM training, bundle
// assembly, classification, cross-validation, benchmarking and artifact
// inspection.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prodapt/prodapt.hpp"

namespace fs = std::filesystem;
using namespace prodapt;

namespace {

struct GlobalOpts {
    uint64_t seed = 42;
    bool seed_explicit = false;
    std::string config_path;
    int threads = default_thread_count();

    EngineConfig config() const {
        EngineConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        if (seed_explicit) {
            cfg.train.seed = seed;
            cfg.svm.seed = seed;
        }
        return cfg;
    }
};

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open output file: " + path);
    return out;
}

std::map<std::string, std::vector<TokenSequence>> tokenize_by_label(
    const std::vector<CorpusRecord>& records) {
    std::map<std::string, std::vector<TokenSequence>> out;
    for (const CorpusRecord& r : records) out[r.label].push_back(tokenize(r.text));
    return out;
}

Backbone load_or_init_backbone(const std::string& path, const ModelConfig& cfg, uint64_t seed,
                               std::ostream& log) {
    if (fs::exists(path)) {
        log << "loading backbone " << path << "\n";
        Backbone bb = load_backbone(path);
        if (!(bb.cfg == cfg))
            log << "note: backbone checkpoint configuration takes precedence over --config\n";
        return bb;
    }
    log << "initializing random backbone (seed " << seed << ") -> " << path << "\n";
    Backbone bb = init_backbone(cfg, seed);
    if (const fs::path parent = fs::path(path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    save_backbone(bb, path);
    return bb;
}

int cmd_gen_synth(const GlobalOpts& g, const std::string& out_path, int n_sources,
                  int docs_per_source, int len_min, int len_max, double tv_floor) {
    const auto sources = make_sources(n_sources, g.seed, tv_floor, len_min, len_max);
    const auto records = gen_synthetic(sources, docs_per_source, g.seed, tv_floor);
    if (const fs::path parent = fs::path(out_path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    write_corpus(records, out_path);
    std::cout << "wrote " << records.size() << " documents (" << n_sources << " sources x "
              << docs_per_source << ") to " << out_path << "\n";
    for (size_t i = 0; i < sources.size(); ++i)
        for (size_t j = i + 1; j < sources.size(); ++j)
            std::cout << "  TV(" << sources[i].label << ", " << sources[j].label
                      << ") = " << source_distance(sources[i], sources[j]) << "\n";
    return 0;
}

int cmd_train(const GlobalOpts& g, const std::string& corpus_path, const std::string& out_dir,
              std::string backbone_path, const std::string& system, int jobs) {
    const EngineConfig cfg = g.config();
    const IngestResult ing = ingest(corpus_path);
    if (!ing.rejects.empty())
        std::cout << "note: " << ing.rejects.size() << " malformed lines rejected\n";
    fs::create_directories(out_dir);

    if (system == "svm") {
        std::vector<TokenSequence> docs;
        docs.reserve(ing.records.size());
        for (const CorpusRecord& r : ing.records) docs.push_back(tokenize(r.text));
        const Vocabulary vocab = Vocabulary::build(docs, cfg.svm.min_df);
        std::vector<SvmExample> data;
        data.reserve(docs.size());
        for (size_t i = 0; i < docs.size(); ++i)
            data.push_back(SvmExample{featurize(docs[i], vocab), ing.records[i].label});
        const LinearOVRModel model = train_svm(data, vocab, cfg.svm);
        const std::string path = out_dir + "/svm.pdpt";
        save_svm(model, path);
        size_t correct = 0;
        for (size_t i = 0; i < data.size(); ++i)
            if (predict_svm(model, data[i].features).label == ing.records[i].label) ++correct;
        std::cout << "svm model (" << model.labels.size() << " labels, vocab " << vocab.size()
                  << ") -> " << path << "\n";
        std::cout << "training accuracy "
                  << static_cast<double>(correct) / static_cast<double>(data.size()) << "\n";
        return 0;
    }

    if (backbone_path.empty()) backbone_path = out_dir + "/backbone.pdpt";
    const Backbone bb = load_or_init_backbone(backbone_path, cfg.model, g.seed, std::cout);
    const auto by_label = tokenize_by_label(ing.records);
    std::vector<std::string> labels;
    for (const auto& [label, docs] : by_label) labels.push_back(label);
    std::cout << "training " << labels.size() << " branches (" << jobs << " job"
              << (jobs > 1 ? "s" : "") << ")\n";

    std::vector<std::string> summaries(labels.size());
    parallel_for(static_cast<int64_t>(labels.size()), jobs, [&](int64_t li) {
        const std::string& label = labels[static_cast<size_t>(li)];
        auto [branch, report] =
            train_branch(bb, by_label.at(label), cfg.train, cfg.adapter, label);
        const std::string branch_path = out_dir + "/" + label + ".branch.best";
        save_branch(branch, branch_path, bb.cfg);
        std::ofstream rep = open_out(out_dir + "/" + label + ".train.jsonl");
        write_train_report_jsonl(report, rep);
        std::ostringstream line;
        line << "  " << label << ": best val " << report.best_val_loss << " @ epoch "
             << report.best_epoch << (report.stopped_early ? " (early stop)" : "") << " -> "
             << branch_path;
        summaries[static_cast<size_t>(li)] = line.str();
    });
    for (const std::string& s : summaries) std::cout << s << "\n";
    return 0;
}

int cmd_assemble(const std::string& backbone_path, std::vector<std::string> branch_paths,
                 const std::string& models_dir, const std::string& out_path) {
    if (!models_dir.empty()) {
        for (const auto& entry : fs::directory_iterator(models_dir)) {
            const std::string p = entry.path().string();
            if (p.size() > 12 && p.substr(p.size() - 12) == ".branch.best")
                branch_paths.push_back(p);
        }
        std::sort(branch_paths.begin(), branch_paths.end());
    }
    if (branch_paths.empty()) throw UsageError("assemble needs --branches or --models-dir");
    const BundleManifest m = build_manifest(backbone_path, branch_paths, out_path);
    write_manifest(m, out_path);
    // Verify the bundle assembles cleanly before declaring success.
    const FusedModel fm = load_bundle(out_path);
    std::cout << "bundle manifest (" << fm.branch_count() << " branches) -> " << out_path << "\n";
    return 0;
}

int cmd_classify(const GlobalOpts& g, const std::string& bundle_path, const std::string& text,
                 const std::string& file_path, const std::string& corpus_path,
                 const std::string& mode, const std::string& out_path) {
    const FusedModel fm = load_bundle(bundle_path);
    std::vector<std::pair<std::string, std::string>> docs;  // (id, text)
    if (!text.empty()) docs.emplace_back("arg", text);
    if (!file_path.empty()) {
        std::ifstream in(file_path, std::ios::binary);
        if (!in) throw DataError("cannot open document file: " + file_path);
        std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (body.empty()) throw DataError("document file is empty: " + file_path);
        docs.emplace_back(file_path, body);
    }
    if (!corpus_path.empty())
        for (const CorpusRecord& r : ingest(corpus_path).records) docs.emplace_back(r.id, r.text);
    if (docs.empty()) throw UsageError("classify needs --text, --file or --corpus");

    std::optional<std::ofstream> out;
    if (!out_path.empty()) out = open_out(out_path);
    size_t shown = 0;
    for (const auto& [id, body] : docs) {
        const TokenSequence tokens = tokenize(body);
        InferenceResult r;
        if (mode == "fused") {
            r = classify(fm, tokens, g.threads);
        } else {
            Stopwatch sw;
            const auto losses = sequential_losses(fm, tokens, mode == "sequential-reload");
            r = pick_argmin(losses);
            r.wall_ms = sw.elapsed_ms();
        }
        if (docs.size() == 1 || shown < 3) {
            if (docs.size() > 1) std::cout << "[" << id << "]\n";
            print_inference(r, std::cout);
        } else if (shown == 3) {
            std::cout << "... (" << docs.size() - 3 << " more documents, see --out)\n";
        }
        if (out) *out << inference_to_json(r, id).dump() << "\n";
        ++shown;
    }
    return 0;
}

int cmd_eval_cv(const GlobalOpts& g, const std::string& corpus_path, const std::string& system,
                int k, const std::string& out_path) {
    const EngineConfig cfg = g.config();
    const IngestResult ing = ingest(corpus_path);
    const CvSystem sys = system == "svm" ? CvSystem::Svm : CvSystem::Prodapt;
    const CvReport report = run_cv(ing.records, k, sys, cfg, g.seed, g.threads);
    print_cv_report(report, std::cout);
    if (!out_path.empty()) {
        std::ofstream out = open_out(out_path);
        write_cv_report_jsonl(report, out);
    }
    return 0;
}

int cmd_bench(const GlobalOpts& g, const std::string& bundle_path, const std::string& corpus_path,
              const std::string& svm_path, int reps, int warmup, int max_docs,
              const std::string& out_path) {
    const FusedModel fm = load_bundle(bundle_path);
    const IngestResult ing = ingest(corpus_path);
    std::vector<TokenSequence> docs;
    for (const CorpusRecord& r : ing.records) {
        if (max_docs > 0 && static_cast<int>(docs.size()) >= max_docs) break;
        docs.push_back(tokenize(r.text));
    }
    std::optional<LinearOVRModel> svm_model;
    if (!svm_path.empty()) svm_model = load_svm(svm_path);
    const BenchReport report = bench(fm, docs, svm_model, svm_path, reps, warmup, g.threads);
    print_bench_report(report, std::cout);
    if (!out_path.empty()) {
        std::ofstream out = open_out(out_path);
        write_bench_report_jsonl(report, out);
    }
    return 0;
}

int cmd_inspect(const std::string& backbone_path, const std::string& branch_path,
                const std::string& bundle_path, const std::string& svm_path) {
    bool did = false;
    if (!backbone_path.empty()) {
        const Backbone bb = load_backbone(backbone_path);
        const ParamCounts c = count_parameters(bb);
        std::cout << "backbone " << backbone_path << "\n"
                  << "  layers " << bb.cfg.n_layers << ", d_model " << bb.cfg.d_model
                  << ", heads " << bb.cfg.n_heads << ", ffn " << bb.cfg.d_ffn << ", vocab "
                  << bb.cfg.vocab_size << ", max_seq " << bb.cfg.max_seq_len << "\n"
                  << "  parameters " << c.total << " (trainable " << c.trainable << ")\n"
                  << "  storage " << human_bytes(file_size_bytes(backbone_path)) << "\n"
                  << "  frozen-hash " << hex_u64(backbone_hash(bb)) << "\n";
        did = true;
        if (!branch_path.empty()) {
            const L1Branch br = load_branch(branch_path, bb);
            const ParamCounts bc = count_parameters(br);
            const double ratio = static_cast<double>(file_size_bytes(branch_path)) /
                                 static_cast<double>(file_size_bytes(backbone_path));
            std::cout << "branch " << branch_path << "\n"
                      << "  label '" << br.label << "', "
                      << adapter_arch_name(br.config.architecture) << ", reduction "
                      << br.config.reduction_factor << "\n"
                      << "  parameters " << bc.total << " (trainable " << bc.trainable << ")\n"
                      << "  storage " << human_bytes(file_size_bytes(branch_path))
                      << "  (branch/backbone byte ratio " << ratio << ")\n"
                      << "  trained epochs " << br.meta.trained_epochs << ", best val loss "
                      << br.meta.best_val_loss << "\n";
        }
    } else if (!branch_path.empty()) {
        throw UsageError("--branch needs --backbone to validate against");
    }
    if (!bundle_path.empty()) {
        const FusedModel fm = load_bundle(bundle_path);
        const ParamCounts bbc = count_parameters(fm.backbone());
        int64_t branch_total = 0;
        uint64_t branch_bytes = 0;
        std::cout << "bundle " << bundle_path << "\n";
        std::cout << "  backbone " << fm.backbone_path() << "  "
                  << human_bytes(file_size_bytes(fm.backbone_path())) << "  " << bbc.total
                  << " params\n";
        for (const BranchSlot& s : fm.slots()) {
            const ParamCounts c = count_parameters(s.branch);
            branch_total += c.total;
            branch_bytes += file_size_bytes(s.source_path);
            std::cout << "  branch '" << s.branch.label << "'  "
                      << human_bytes(file_size_bytes(s.source_path)) << "  " << c.total
                      << " params\n";
        }
        const uint64_t bb_bytes = file_size_bytes(fm.backbone_path());
        std::cout << "  total storage " << human_bytes(bb_bytes + branch_bytes) << " vs "
                  << human_bytes(static_cast<uint64_t>(fm.branch_count()) * bb_bytes +
                                 branch_bytes)
                  << " for " << fm.branch_count() << " standalone models\n";
        std::cout << "  total parameters " << bbc.total + branch_total << " (trainable "
                  << branch_total << ")\n";
        std::cout << "  config checksum " << hex_u64(fm.config_checksum()) << "\n";
        did = true;
    }
    if (!svm_path.empty()) {
        const LinearOVRModel m = load_svm(svm_path);
        std::cout << "svm " << svm_path << "\n"
                  << "  labels " << m.labels.size() << ", vocabulary " << m.vocab.size() << "\n"
                  << "  parameters "
                  << static_cast<int64_t>(m.labels.size()) * (m.vocab.size() + 1) << "\n"
                  << "  storage " << human_bytes(file_size_bytes(svm_path)) << "\n";
        did = true;
    }
    if (!did) throw UsageError("inspect needs --backbone, --bundle or --svm");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prodapt: native-language identification by per-language adapter branches "
                 "over a shared frozen transformer, classified by least LM loss"};
    app.require_subcommand(1);

    GlobalOpts g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Global seed")->capture_default_str();
    app.add_option("--config", g.config_path, "Flat key=value configuration file");
    app.add_option("--threads", g.threads, "Worker threads")->capture_default_str();

    // gen-synth
    auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic labeled corpus");
    std::string gen_out;
    int gen_sources = 5, gen_docs = 200, gen_len_min = 40, gen_len_max = 160;
    double gen_tv = 0.3;
    gen->add_option("--out", gen_out, "Output corpus (JSON lines)")->required();
    gen->add_option("--sources", gen_sources, "Number of sources")->capture_default_str();
    gen->add_option("--docs-per-source", gen_docs, "Documents per source")->capture_default_str();
    gen->add_option("--len-min", gen_len_min, "Minimum document bytes")->capture_default_str();
    gen->add_option("--len-max", gen_len_max, "Maximum document bytes")->capture_default_str();
    gen->add_option("--tv-floor", gen_tv, "Minimum pairwise total-variation distance")
        ->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "Train one branch per label (or an SVM)");
    std::string train_corpus, train_out_dir, train_backbone, train_system = "prodapt";
    int train_jobs = 1;
    train->add_option("--corpus", train_corpus, "Labeled corpus (JSON lines)")->required();
    train->add_option("--out-dir", train_out_dir, "Output directory")->required();
    train->add_option("--backbone", train_backbone,
                      "Backbone checkpoint (created at <out-dir>/backbone.pdpt if absent)");
    train->add_option("--system", train_system, "prodapt | svm")
        ->check(CLI::IsMember({"prodapt", "svm"}))
        ->capture_default_str();
    train->add_option("--jobs", train_jobs, "Concurrent branch trainings")->capture_default_str();

    // assemble
    auto* assemble = app.add_subcommand("assemble", "Build a fused bundle manifest");
    std::string asm_backbone, asm_models_dir, asm_out;
    std::vector<std::string> asm_branches;
    assemble->add_option("--backbone", asm_backbone, "Backbone checkpoint")->required();
    assemble->add_option("--branches", asm_branches, "Branch checkpoint files");
    assemble->add_option("--models-dir", asm_models_dir,
                         "Directory scanned for *.branch.best files");
    assemble->add_option("--out", asm_out, "Manifest path")->required();

    // classify
    auto* cls = app.add_subcommand("classify", "Classify documents with a fused bundle");
    std::string cls_bundle, cls_text, cls_file, cls_corpus, cls_mode = "fused", cls_out;
    cls->add_option("--bundle", cls_bundle, "Bundle manifest")->required();
    cls->add_option("--text", cls_text, "Document text on the command line");
    cls->add_option("--file", cls_file, "Document file");
    cls->add_option("--corpus", cls_corpus, "Corpus of documents (JSON lines)");
    cls->add_option("--mode", cls_mode, "fused | sequential | sequential-reload")
        ->check(CLI::IsMember({"fused", "sequential", "sequential-reload"}))
        ->capture_default_str();
    cls->add_option("--out", cls_out, "Write per-document results as JSON lines");

    // eval-cv
    auto* cv = app.add_subcommand("eval-cv", "Stratified k-fold cross-validation");
    std::string cv_corpus, cv_system = "prodapt", cv_out;
    int cv_k = 10;
    cv->add_option("--corpus", cv_corpus, "Labeled corpus (JSON lines)")->required();
    cv->add_option("--system", cv_system, "prodapt | svm")
        ->check(CLI::IsMember({"prodapt", "svm"}))
        ->capture_default_str();
    cv->add_option("--k", cv_k, "Fold count")->capture_default_str();
    cv->add_option("--out", cv_out, "Write per-fold results as JSON lines");

    // bench
    auto* bn = app.add_subcommand("bench", "Storage, parameter and speed benchmarks");
    std::string bn_bundle, bn_corpus, bn_svm, bn_out;
    int bn_reps = 100, bn_warmup = 10, bn_docs = 4;
    bn->add_option("--bundle", bn_bundle, "Bundle manifest")->required();
    bn->add_option("--corpus", bn_corpus, "Corpus sampled for timing")->required();
    bn->add_option("--svm", bn_svm, "SVM model checkpoint to include");
    bn->add_option("--reps", bn_reps, "Timed repetitions")->capture_default_str();
    bn->add_option("--warmup", bn_warmup, "Warmup repetitions (untimed)")->capture_default_str();
    bn->add_option("--docs", bn_docs, "Documents taken from the corpus (0 = all)")
        ->capture_default_str();
    bn->add_option("--out", bn_out, "Write rows as JSON lines");

    // inspect
    auto* ins = app.add_subcommand("inspect", "Parameter and storage accounting");
    std::string ins_backbone, ins_branch, ins_bundle, ins_svm;
    ins->add_option("--backbone", ins_backbone, "Backbone checkpoint");
    ins->add_option("--branch", ins_branch, "Branch checkpoint (needs --backbone)");
    ins->add_option("--bundle", ins_bundle, "Bundle manifest");
    ins->add_option("--svm", ins_svm, "SVM checkpoint");

    try {
        app.parse(argc, argv);
        g.seed_explicit = seed_opt->count() > 0;
        if (g.threads < 1) throw UsageError("--threads must be at least 1");

        if (gen->parsed())
            return cmd_gen_synth(g, gen_out, gen_sources, gen_docs, gen_len_min, gen_len_max,
                                 gen_tv);
        if (train->parsed())
            return cmd_train(g, train_corpus, train_out_dir, train_backbone, train_system,
                             train_jobs);
        if (assemble->parsed())
            return cmd_assemble(asm_backbone, asm_branches, asm_models_dir, asm_out);
        if (cls->parsed())
            return cmd_classify(g, cls_bundle, cls_text, cls_file, cls_corpus, cls_mode, cls_out);
        if (cv->parsed()) return cmd_eval_cv(g, cv_corpus, cv_system, cv_k, cv_out);
        if (bn->parsed())
            return cmd_bench(g, bn_bundle, bn_corpus, bn_svm, bn_reps, bn_warmup, bn_docs,
                             bn_out);
        if (ins->parsed()) return cmd_inspect(ins_backbone, ins_branch, ins_bundle, ins_svm);
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
