#pragma once

#include <json.hpp>

#include "pushpull/encoder.hpp"
#include "pushpull/objectives.hpp"

namespace pushpull {

struct TrainConfig {
    double lr = 1e-3;       // toy default; the paper-scale preset uses 2e-5
    int batch_size = 32;
    int epochs = 1;
    std::uint64_t seed = 1;
    ObjectiveConfig objective;
    double clip_norm = 0.0;        // 0 = no clipping
    bool lr_linear_decay = false;  // linear decay to 0 over the planned steps

    void validate() const {
        if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (clip_norm < 0.0) throw std::invalid_argument("TrainConfig: clip_norm must be >= 0");
        objective.validate();
    }
};

// Flat JSON forms; keys match the CLI flag names one to one.

inline nlohmann::json to_json(const ModelConfig& m) {
    return {{"layers", m.n_layers},   {"heads", m.n_heads},       {"hidden", m.hidden},
            {"ffn", m.ffn},           {"vocab-size", m.vocab_size}, {"max-len", m.max_len},
            {"classes", m.n_classes}, {"dropout", m.dropout},     {"model-seed", m.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.n_layers = j.at("layers").get<int>();
    m.n_heads = j.at("heads").get<int>();
    m.hidden = j.at("hidden").get<int>();
    m.ffn = j.at("ffn").get<int>();
    m.vocab_size = j.at("vocab-size").get<int>();
    m.max_len = j.at("max-len").get<int>();
    m.n_classes = j.at("classes").get<int>();
    m.dropout = j.at("dropout").get<double>();
    m.seed = j.at("model-seed").get<std::uint64_t>();
    return m;
}

inline nlohmann::json to_json(const TrainConfig& t) {
    return {{"lr", t.lr},
            {"batch-size", t.batch_size},
            {"epochs", t.epochs},
            {"seed", t.seed},
            {"clip-norm", t.clip_norm},
            {"lr-linear-decay", t.lr_linear_decay},
            {"variant", to_string(t.objective.variant)},
            {"alpha", t.objective.alpha},
            {"beta", t.objective.beta},
            {"apt-layer", t.objective.apt_layer},
            {"nt-sigma", t.objective.nt_sigma},
            {"pooling", to_string(t.objective.pooling)},
            {"ept-cap", t.objective.ept_cap}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    t.lr = j.at("lr").get<double>();
    t.batch_size = j.at("batch-size").get<int>();
    t.epochs = j.at("epochs").get<int>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.clip_norm = j.at("clip-norm").get<double>();
    t.lr_linear_decay = j.at("lr-linear-decay").get<bool>();
    t.objective.variant = parse_variant(j.at("variant").get<std::string>());
    t.objective.alpha = j.at("alpha").get<double>();
    t.objective.beta = j.at("beta").get<double>();
    t.objective.apt_layer = j.at("apt-layer").get<int>();
    t.objective.nt_sigma = j.at("nt-sigma").get<double>();
    t.objective.pooling = parse_pooling(j.at("pooling").get<std::string>());
    t.objective.ept_cap = j.at("ept-cap").get<double>();
    return t;
}

}  // namespace pushpull
