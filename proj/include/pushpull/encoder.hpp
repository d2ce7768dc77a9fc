#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pushpull/rng.hpp"
#include "pushpull/tensor.hpp"

namespace pushpull {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int hidden = 64;
    int ffn = 128;
    int vocab_size = 0;
    int max_len = 32;
    int n_classes = 2;
    double dropout = 0.1;
    std::uint64_t seed = 0;

    int head_dim() const { return hidden / n_heads; }

    /// 1-based middle layer, ceil(n/2): layer 6 of a 12-layer stack.
    int middle_layer() const { return (n_layers + 1) / 2; }

    void validate() const {
        if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
        if (n_heads < 1) throw std::invalid_argument("ModelConfig: n_heads must be >= 1");
        if (hidden < 1 || hidden % n_heads != 0) {
            throw std::invalid_argument("ModelConfig: hidden (" + std::to_string(hidden) +
                                        ") must be a positive multiple of n_heads (" + std::to_string(n_heads) + ")");
        }
        if (ffn < 1) throw std::invalid_argument("ModelConfig: ffn width must be >= 1");
        if (vocab_size < 1) throw std::invalid_argument("ModelConfig: vocab_size must be >= 1");
        if (max_len < 3) throw std::invalid_argument("ModelConfig: max_len must be >= 3 ([CLS] token [SEP])");
        if (n_classes < 2) throw std::invalid_argument("ModelConfig: n_classes must be >= 2");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout must be in [0, 1)");
    }
};

/// All trainable tensors. Copying is explicit (clone) because Tensor handles
/// alias their nodes; both siamese views must share one instance.
struct Parameters {
    ModelConfig config;

    Tensor tok_embed, pos_embed, seg_embed;
    Tensor embed_ln_gain, embed_ln_bias;

    struct Layer {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor attn_ln_gain, attn_ln_bias;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        Tensor ffn_ln_gain, ffn_ln_bias;
    };
    std::vector<Layer> layers;

    Tensor cls_w, cls_b;

    Parameters() = default;
    Parameters(const Parameters&) = delete;
    Parameters& operator=(const Parameters&) = delete;
    Parameters(Parameters&&) = default;
    Parameters& operator=(Parameters&&) = default;

    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("embeddings.token", tok_embed);
        out.emplace_back("embeddings.position", pos_embed);
        out.emplace_back("embeddings.segment", seg_embed);
        out.emplace_back("embeddings.ln_gain", embed_ln_gain);
        out.emplace_back("embeddings.ln_bias", embed_ln_bias);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string base = "layers." + std::to_string(i) + ".";
            const Layer& l = layers[i];
            out.emplace_back(base + "attn.wq", l.wq);
            out.emplace_back(base + "attn.bq", l.bq);
            out.emplace_back(base + "attn.wk", l.wk);
            out.emplace_back(base + "attn.bk", l.bk);
            out.emplace_back(base + "attn.wv", l.wv);
            out.emplace_back(base + "attn.bv", l.bv);
            out.emplace_back(base + "attn.wo", l.wo);
            out.emplace_back(base + "attn.bo", l.bo);
            out.emplace_back(base + "attn.ln_gain", l.attn_ln_gain);
            out.emplace_back(base + "attn.ln_bias", l.attn_ln_bias);
            out.emplace_back(base + "ffn.w1", l.ffn_w1);
            out.emplace_back(base + "ffn.b1", l.ffn_b1);
            out.emplace_back(base + "ffn.w2", l.ffn_w2);
            out.emplace_back(base + "ffn.b2", l.ffn_b2);
            out.emplace_back(base + "ffn.ln_gain", l.ffn_ln_gain);
            out.emplace_back(base + "ffn.ln_bias", l.ffn_ln_bias);
        }
        out.emplace_back("classifier.weight", cls_w);
        out.emplace_back("classifier.bias", cls_b);
        return out;
    }

    void zero_grad() {
        for (auto& [name, t] : named()) {
            Tensor copy = t;
            copy.zero_grad();
        }
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named()) n += t.values().size();
        return n;
    }

    Parameters clone() const {
        Parameters out;
        out.config = config;
        auto dup = [](const Tensor& t) { return Tensor::from_values(t.shape(), t.values(), t.requires_grad()); };
        out.tok_embed = dup(tok_embed);
        out.pos_embed = dup(pos_embed);
        out.seg_embed = dup(seg_embed);
        out.embed_ln_gain = dup(embed_ln_gain);
        out.embed_ln_bias = dup(embed_ln_bias);
        for (const Layer& l : layers) {
            Layer c;
            c.wq = dup(l.wq);
            c.bq = dup(l.bq);
            c.wk = dup(l.wk);
            c.bk = dup(l.bk);
            c.wv = dup(l.wv);
            c.bv = dup(l.bv);
            c.wo = dup(l.wo);
            c.bo = dup(l.bo);
            c.attn_ln_gain = dup(l.attn_ln_gain);
            c.attn_ln_bias = dup(l.attn_ln_bias);
            c.ffn_w1 = dup(l.ffn_w1);
            c.ffn_b1 = dup(l.ffn_b1);
            c.ffn_w2 = dup(l.ffn_w2);
            c.ffn_b2 = dup(l.ffn_b2);
            c.ffn_ln_gain = dup(l.ffn_ln_gain);
            c.ffn_ln_bias = dup(l.ffn_ln_bias);
            out.layers.push_back(std::move(c));
        }
        out.cls_w = dup(cls_w);
        out.cls_b = dup(cls_b);
        return out;
    }
};

/// Seeded initialization: embeddings and projections are N(0, 0.02^2)
/// truncated at +/-2 sigma, layer-norm gains are 1, all biases 0.
inline Parameters init_params(const ModelConfig& config) {
    config.validate();
    Parameters p;
    p.config = config;
    RngStream rng(sub_seed(config.seed, "init"));
    auto weight = [&rng](Shape shape) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        for (double& v : t.values()) v = rng.truncated_gaussian(0.02);
        return t;
    };
    auto zeros = [](Shape shape) { return Tensor::zeros(std::move(shape), true); };
    auto ones = [](Shape shape) { return Tensor::full(std::move(shape), 1.0, true); };

    const int d = config.hidden;
    p.tok_embed = weight({config.vocab_size, d});
    p.pos_embed = weight({config.max_len, d});
    p.seg_embed = weight({2, d});
    p.embed_ln_gain = ones({d});
    p.embed_ln_bias = zeros({d});
    for (int i = 0; i < config.n_layers; ++i) {
        Parameters::Layer l;
        l.wq = weight({d, d});
        l.bq = zeros({d});
        l.wk = weight({d, d});
        l.bk = zeros({d});
        l.wv = weight({d, d});
        l.bv = zeros({d});
        l.wo = weight({d, d});
        l.bo = zeros({d});
        l.attn_ln_gain = ones({d});
        l.attn_ln_bias = zeros({d});
        l.ffn_w1 = weight({config.ffn, d});
        l.ffn_b1 = zeros({config.ffn});
        l.ffn_w2 = weight({d, config.ffn});
        l.ffn_b2 = zeros({d});
        l.ffn_ln_gain = ones({d});
        l.ffn_ln_bias = zeros({d});
        p.layers.push_back(std::move(l));
    }
    p.cls_w = weight({config.n_classes, d});
    p.cls_b = zeros({config.n_classes});
    return p;
}

/// One tokenized sequence: [CLS] s1 [SEP] s2 [SEP] plus right padding.
struct TokenizedInput {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    Mask valid;  // 1 = real token, prefix pattern

    int length() const { return static_cast<int>(token_ids.size()); }
};

struct EncodeOptions {
    bool training = false;
    RngStream* rng = nullptr;  // required when training with dropout > 0
};

struct EncodeOutput {
    Tensor embedding_output;                      // L x d, post embedding-sum layer norm
    std::vector<Tensor> hidden;                   // per layer, L x d
    std::vector<std::vector<Tensor>> attention;   // [layer][head], L x L post-softmax
    Tensor cls_state;                             // d, position 0 of the last layer
};

namespace detail {

inline void check_input(const ModelConfig& cfg, const TokenizedInput& in) {
    const int len = in.length();
    if (len < 1 || len > cfg.max_len) {
        throw std::invalid_argument("encode: sequence length " + std::to_string(len) + " outside [1, " +
                                    std::to_string(cfg.max_len) + "]");
    }
    if (static_cast<int>(in.segment_ids.size()) != len || static_cast<int>(in.valid.size()) != len) {
        throw std::invalid_argument("encode: token/segment/mask lengths disagree");
    }
    for (int id : in.token_ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::invalid_argument("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(cfg.vocab_size));
        }
    }
    for (int s : in.segment_ids) {
        if (s != 0 && s != 1) throw std::invalid_argument("encode: segment ids must be 0 or 1");
    }
    if (!in.valid[0]) throw std::invalid_argument("encode: position 0 ([CLS]) must be valid");
}

inline RngStream* dropout_rng(const ModelConfig& cfg, const EncodeOptions& opts) {
    if (!opts.training || cfg.dropout == 0.0) return nullptr;
    if (!opts.rng) throw std::invalid_argument("encode: training with dropout requires an RNG");
    return opts.rng;
}

}  // namespace detail

/// Embedding layer: token + position + segment embeddings, layer-normed.
inline Tensor embed_input(const Parameters& params, const TokenizedInput& in) {
    detail::check_input(params.config, in);
    const int len = in.length();
    std::vector<int> positions(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;
    const Tensor summed = add(add(gather_rows(params.tok_embed, in.token_ids), gather_rows(params.pos_embed, positions)),
                              gather_rows(params.seg_embed, in.segment_ids));
    return layer_norm(summed, params.embed_ln_gain, params.embed_ln_bias);
}

/// Transformer stack on a (possibly perturbed) embedding output. Attention is
/// post-softmax with padded keys excluded exactly and padded query rows
/// zeroed, so padding can never influence any exposed quantity.
inline EncodeOutput run_from_embedding(const Parameters& params, Tensor embedding_output, const TokenizedInput& in,
                                       const EncodeOptions& opts = {}) {
    const ModelConfig& cfg = params.config;
    detail::check_input(cfg, in);
    RngStream* drop = detail::dropout_rng(cfg, opts);

    EncodeOutput out;
    out.embedding_output = embedding_output;
    const int dh = cfg.head_dim();
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor h = drop ? dropout(embedding_output, cfg.dropout, *drop) : embedding_output;
    for (int layer = 0; layer < cfg.n_layers; ++layer) {
        const Parameters::Layer& l = params.layers[static_cast<std::size_t>(layer)];
        const Tensor q = linear(h, l.wq, l.bq);
        const Tensor k = linear(h, l.wk, l.bk);
        const Tensor v = linear(h, l.wv, l.bv);
        std::vector<Tensor> heads;
        std::vector<Tensor> probs;
        heads.reserve(static_cast<std::size_t>(cfg.n_heads));
        probs.reserve(static_cast<std::size_t>(cfg.n_heads));
        for (int head = 0; head < cfg.n_heads; ++head) {
            const Tensor qh = slice_cols(q, head * dh, dh);
            const Tensor kh = slice_cols(k, head * dh, dh);
            const Tensor vh = slice_cols(v, head * dh, dh);
            const Tensor scores = scaled_dot_nt(qh, kh, scale_factor);
            const Tensor attn = zero_rows(softmax_rows(scores, &in.valid), in.valid);
            probs.push_back(attn);
            heads.push_back(matmul(attn, vh));
        }
        out.attention.push_back(std::move(probs));
        Tensor attn_out = linear(concat_cols(heads), l.wo, l.bo);
        if (drop) attn_out = dropout(attn_out, cfg.dropout, *drop);
        h = layer_norm(add(h, attn_out), l.attn_ln_gain, l.attn_ln_bias);
        Tensor f = linear(gelu(linear(h, l.ffn_w1, l.ffn_b1)), l.ffn_w2, l.ffn_b2);
        if (drop) f = dropout(f, cfg.dropout, *drop);
        h = layer_norm(add(h, f), l.ffn_ln_gain, l.ffn_ln_bias);
        out.hidden.push_back(h);
    }
    out.cls_state = row(out.hidden.back(), 0);
    return out;
}

inline EncodeOutput encode(const Parameters& params, const TokenizedInput& in, const EncodeOptions& opts = {}) {
    return run_from_embedding(params, embed_input(params, in), in, opts);
}

/// softmax(W h + b) over the [CLS] state.
inline Tensor classify(const Parameters& params, const Tensor& cls_state) {
    for (double v : cls_state.values()) {
        if (!std::isfinite(v)) throw std::invalid_argument("classify: non-finite [CLS] state");
    }
    return softmax_rows(linear(cls_state, params.cls_w, params.cls_b));
}

}  // namespace pushpull
