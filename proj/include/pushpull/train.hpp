#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pushpull/data.hpp"
#include "pushpull/objectives.hpp"
#include "pushpull/optimizer.hpp"
#include "pushpull/serialize.hpp"
#include "pushpull/synthetic.hpp"

namespace pushpull {

struct MetricsRow {
    long long step = 0;
    double ce = 0, ept = 0, apt = 0, total = 0;
};

/// Everything a run carries: exactly the content of a checkpoint.
struct TrainState {
    TrainConfig train_config;
    Vocabulary vocab;
    Parameters params;
    AdamState optimizer;
    RngStream model_rng;  // dropout and noise-target draws
    long long global_step = 0;
    int epoch = 0;          // next epoch to run (0-based)
    int step_in_epoch = 0;  // batches already consumed in `epoch`
};

inline TrainState make_train_state(const ModelConfig& model, const TrainConfig& train, Vocabulary vocab) {
    train.validate();
    TrainState s;
    s.train_config = train;
    s.vocab = std::move(vocab);
    s.params = init_params(model);
    s.optimizer = AdamState::init(s.params.named());
    s.model_rng = RngStream(sub_seed(train.seed, "model"));
    return s;
}

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream rng(sub_seed(seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

}  // namespace detail

/// Deterministic fine-tuning loop: seeded shuffling, per-step loss logging,
/// resumable mid-epoch from a checkpointed TrainState.
inline std::vector<MetricsRow> train(TrainState& state, const std::vector<PairedExample>& data) {
    const TrainConfig& cfg = state.train_config;
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    const ModelConfig& model = state.params.config;

    // tokenize once; collation happens per batch
    std::vector<std::pair<TokenizedInput, TokenizedInput>> tokenized;
    std::vector<int> labels;
    tokenized.reserve(data.size());
    labels.reserve(data.size());
    for (const PairedExample& ex : data) {
        tokenized.emplace_back(construct_input(state.vocab, ex.premise, ex.hypothesis, model.max_len),
                               construct_input(state.vocab, ex.premise_aug, ex.hypothesis_aug, model.max_len));
        if (ex.label < 0 || ex.label >= model.n_classes) {
            throw std::invalid_argument("train: label " + std::to_string(ex.label) + " outside " +
                                        std::to_string(model.n_classes) + " classes");
        }
        labels.push_back(ex.label);
    }

    const long long batches_per_epoch = static_cast<long long>((data.size() + cfg.batch_size - 1) / cfg.batch_size);
    const long long planned_steps = batches_per_epoch * cfg.epochs;
    const auto named = state.params.named();

    std::vector<MetricsRow> metrics;
    for (; state.epoch < cfg.epochs; state.epoch++, state.step_in_epoch = 0) {
        const auto order = detail::epoch_order(data.size(), cfg.seed, state.epoch);
        for (; state.step_in_epoch < batches_per_epoch; ++state.step_in_epoch) {
            const std::size_t begin = static_cast<std::size_t>(state.step_in_epoch) * cfg.batch_size;
            const std::size_t end = std::min(begin + static_cast<std::size_t>(cfg.batch_size), data.size());
            std::vector<std::pair<TokenizedInput, TokenizedInput>> chunk;
            std::vector<int> chunk_labels;
            for (std::size_t i = begin; i < end; ++i) {
                chunk.push_back(tokenized[order[i]]);
                chunk_labels.push_back(labels[order[i]]);
            }
            const PairedBatch batch = collate(chunk, chunk_labels);

            EncodeOptions opts;
            opts.training = true;
            opts.rng = &state.model_rng;
            const LossBreakdown loss = total_loss(state.params, batch, cfg.objective, opts);
            if (!std::isfinite(loss.total_value())) {
                throw std::runtime_error("train: loss diverged (non-finite) at step " +
                                         std::to_string(state.global_step));
            }
            // the srpt variant logs its pull term in the apt column (same role, same weight)
            const double pull = cfg.objective.variant == Variant::ept_srpt ? loss.srpt_value() : loss.apt_value();
            metrics.push_back({state.global_step, loss.ce_value(), loss.ept_value(), pull, loss.total_value()});

            state.params.zero_grad();
            loss.total.backward();
            if (cfg.clip_norm > 0.0) clip_global_norm(named, cfg.clip_norm);
            double lr = cfg.lr;
            if (cfg.lr_linear_decay) {
                lr *= std::max(0.0, 1.0 - static_cast<double>(state.global_step) / static_cast<double>(planned_steps));
            }
            adam_step(named, state.optimizer, lr);
            ++state.global_step;
        }
    }
    return metrics;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "step,ce,ept,apt,total\n";
    char buf[160];
    for (const MetricsRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g\n", r.step, r.ce, r.ept, r.apt, r.total);
        f << buf;
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary container, JSON header + raw double arrays.
// save -> load -> save is byte-identical.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'P', 'P', 'C', 'K'};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::istream& is, std::vector<double>& v) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const TrainState& state) {
    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["model"] = to_json(state.params.config);
    header["train"] = to_json(state.train_config);
    header["vocab"] = std::vector<std::string>(state.vocab.tokens().begin() + 4, state.vocab.tokens().end());
    header["rng"] = state.model_rng.save_state();
    header["global-step"] = state.global_step;
    header["epoch"] = state.epoch;
    header["step-in-epoch"] = state.step_in_epoch;
    header["adam-t"] = state.optimizer.t;
    const std::string header_str = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(kCheckpointMagic, 4);
    detail::write_u32(f, kCheckpointVersion);
    detail::write_u64(f, header_str.size());
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : state.params.named()) detail::write_doubles(f, t.values());
    for (const auto& m : state.optimizer.m) detail::write_doubles(f, m);
    for (const auto& v : state.optimizer.v) detail::write_doubles(f, v);
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

inline TrainState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
        throw std::runtime_error(path + ": not a checkpoint file");
    }
    const std::uint32_t version = detail::read_u32(f);
    if (version != kCheckpointVersion) {
        throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint64_t header_len = detail::read_u64(f);
    std::string header_str(header_len, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw std::runtime_error(path + ": truncated header");
    const nlohmann::json header = nlohmann::json::parse(header_str);

    TrainState state;
    const ModelConfig model = model_config_from_json(header.at("model"));
    state.train_config = train_config_from_json(header.at("train"));
    state.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
    if (state.vocab.size() != model.vocab_size) {
        throw std::runtime_error(path + ": vocabulary size does not match the stored model config");
    }
    state.params = init_params(model);
    state.optimizer = AdamState::init(state.params.named());
    state.model_rng.restore_state(header.at("rng").get<std::string>());
    state.global_step = header.at("global-step").get<long long>();
    state.epoch = header.at("epoch").get<int>();
    state.step_in_epoch = header.at("step-in-epoch").get<int>();
    state.optimizer.t = header.at("adam-t").get<long long>();

    for (const auto& [name, t] : state.params.named()) {
        Tensor tensor = t;
        detail::read_doubles(f, tensor.values());
    }
    for (auto& m : state.optimizer.m) detail::read_doubles(f, m);
    for (auto& v : state.optimizer.v) detail::read_doubles(f, v);
    if (!f) throw std::runtime_error(path + ": truncated parameter data");
    return state;
}

}  // namespace pushpull
