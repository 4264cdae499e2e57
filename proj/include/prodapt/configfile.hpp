#pragma once

// Flat key = value configuration files. Every ModelConfig, AdapterConfig,
// TrainConfig and SvmConfig field is addressable; unknown keys are errors.
//
//   # comment
//   model.n_layers = 2
//   adapter.reduction_factor = 16
//   train.learning_rate = 1e-4

#include <fstream>
#include <map>
#include <string>

#include "prodapt/adapters.hpp"
#include "prodapt/common.hpp"
#include "prodapt/model.hpp"
#include "prodapt/svm.hpp"
#include "prodapt/train.hpp"

namespace prodapt {

struct EngineConfig {
    ModelConfig model;
    AdapterConfig adapter;
    TrainConfig train;
    SvmConfig svm;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const int x = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "' needs an integer, got '" + v + "'");
    }
}

inline float parse_float(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const float x = std::stof(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "' needs a number, got '" + v + "'");
    }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<uint64_t>(x);
    } catch (const std::exception&) {
        throw DataError("config key '" + key + "' needs an unsigned integer, got '" + v + "'");
    }
}

}  // namespace detail

inline void apply_config_entry(EngineConfig& cfg, const std::string& key,
                               const std::string& value) {
    using detail::parse_float;
    using detail::parse_int;
    using detail::parse_u64;
    if (key == "model.n_layers") cfg.model.n_layers = parse_int(key, value);
    else if (key == "model.d_model") cfg.model.d_model = parse_int(key, value);
    else if (key == "model.n_heads") cfg.model.n_heads = parse_int(key, value);
    else if (key == "model.d_ffn") cfg.model.d_ffn = parse_int(key, value);
    else if (key == "model.vocab_size") cfg.model.vocab_size = parse_int(key, value);
    else if (key == "model.max_seq_len") cfg.model.max_seq_len = parse_int(key, value);
    else if (key == "model.gelu") {
        if (value == "tanh") cfg.model.gelu = GeluKind::Tanh;
        else if (value == "erf") cfg.model.gelu = GeluKind::Erf;
        else throw DataError("config key 'model.gelu' must be 'tanh' or 'erf', got '" + value + "'");
    } else if (key == "adapter.architecture") {
        if (value == "houlsby") cfg.adapter.architecture = AdapterArch::Houlsby;
        else if (value == "pfeiffer") cfg.adapter.architecture = AdapterArch::Pfeiffer;
        else throw DataError("config key 'adapter.architecture' must be 'houlsby' or 'pfeiffer', got '" +
                             value + "'");
    } else if (key == "adapter.reduction_factor")
        cfg.adapter.reduction_factor = parse_int(key, value);
    else if (key == "adapter.nonlinearity") {
        if (value == "gelu_tanh") cfg.adapter.nonlinearity = GeluKind::Tanh;
        else if (value == "gelu_erf") cfg.adapter.nonlinearity = GeluKind::Erf;
        else throw DataError("config key 'adapter.nonlinearity' must be 'gelu_tanh' or 'gelu_erf', got '" +
                             value + "'");
    } else if (key == "adapter.head_mode") {
        if (value != "untied_lm_head")
            throw DataError("config key 'adapter.head_mode' supports only 'untied_lm_head'");
        cfg.adapter.head_mode = HeadMode::UntiedLmHead;
    } else if (key == "train.optimizer") {
        if (value != "adam")
            throw DataError("config key 'train.optimizer' supports only 'adam', got '" + value +
                            "'");
    } else if (key == "train.epochs") cfg.train.epochs = parse_int(key, value);
    else if (key == "train.learning_rate") cfg.train.learning_rate = parse_float(key, value);
    else if (key == "train.batch_size") cfg.train.batch_size = parse_int(key, value);
    else if (key == "train.early_stop_patience")
        cfg.train.early_stop_patience = parse_int(key, value);
    else if (key == "train.val_fraction") cfg.train.val_fraction = parse_float(key, value);
    else if (key == "train.seed") cfg.train.seed = parse_u64(key, value);
    else if (key == "train.adam_beta1") cfg.train.adam_beta1 = parse_float(key, value);
    else if (key == "train.adam_beta2") cfg.train.adam_beta2 = parse_float(key, value);
    else if (key == "train.adam_eps") cfg.train.adam_eps = parse_float(key, value);
    else if (key == "train.clip_norm") cfg.train.clip_norm = parse_float(key, value);
    else if (key == "svm.lambda") cfg.svm.lambda = parse_float(key, value);
    else if (key == "svm.epochs") cfg.svm.epochs = parse_int(key, value);
    else if (key == "svm.seed") cfg.svm.seed = parse_u64(key, value);
    else if (key == "svm.min_df") cfg.svm.min_df = parse_int(key, value);
    else throw DataError("unknown config key '" + key + "'");
}

inline EngineConfig load_config(const std::string& path, EngineConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("config line " + std::to_string(line_no) + " of " + path +
                            " is not 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw DataError("config line " + std::to_string(line_no) + " of " + path +
                            " is not 'key = value'");
        apply_config_entry(base, key, value);
    }
    base.model.validate();
    base.adapter.validate(base.model);
    base.train.validate();
    base.svm.validate();
    return base;
}

}  // namespace prodapt
