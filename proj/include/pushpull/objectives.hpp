#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "pushpull/data.hpp"
#include "pushpull/encoder.hpp"
#include "pushpull/rng.hpp"
#include "pushpull/tensor.hpp"

namespace pushpull {

/// Training-objective variants: the full method, the augmentation-only and
/// plain cross-entropy baselines, and the two replacement-target ablations.
enum class Variant { ept_apt, rsda, ce_only, nt_apt, ept_srpt };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::ept_apt: return "ept_apt";
        case Variant::rsda: return "rsda";
        case Variant::ce_only: return "ce_only";
        case Variant::nt_apt: return "nt_apt";
        case Variant::ept_srpt: return "ept_srpt";
    }
    throw std::logic_error("unreachable variant");
}

inline Variant parse_variant(const std::string& s) {
    if (s == "ept_apt") return Variant::ept_apt;
    if (s == "rsda") return Variant::rsda;
    if (s == "ce_only") return Variant::ce_only;
    if (s == "nt_apt") return Variant::nt_apt;
    if (s == "ept_srpt") return Variant::ept_srpt;
    throw std::invalid_argument("unknown variant '" + s + "' (expected ept_apt|rsda|ce_only|nt_apt|ept_srpt)");
}

/// Which positions count as valid for mean-pooled sentence representations.
enum class PoolingScope { all_valid, content_only };

inline std::string to_string(PoolingScope p) { return p == PoolingScope::all_valid ? "all_valid" : "content_only"; }

inline PoolingScope parse_pooling(const std::string& s) {
    if (s == "all_valid") return PoolingScope::all_valid;
    if (s == "content_only") return PoolingScope::content_only;
    throw std::invalid_argument("unknown pooling scope '" + s + "' (expected all_valid|content_only)");
}

struct ObjectiveConfig {
    double alpha = 1.0;
    double beta = 0.1;
    int apt_layer = 0;  // 1-based; 0 resolves to the model's middle layer
    Variant variant = Variant::ept_apt;
    double nt_sigma = 0.01;
    PoolingScope pooling = PoolingScope::all_valid;
    double ept_cap = 0.0;  // optional per-pair push-magnitude cap; 0 = unclamped

    int resolved_apt_layer(const ModelConfig& model) const {
        const int layer = apt_layer == 0 ? model.middle_layer() : apt_layer;
        if (layer < 1 || layer > model.n_layers) {
            throw std::invalid_argument("apt_layer " + std::to_string(layer) + " outside 1.." +
                                        std::to_string(model.n_layers));
        }
        return layer;
    }

    void validate() const {
        if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("objective weights must be >= 0");
        if (nt_sigma <= 0.0) throw std::invalid_argument("nt_sigma must be > 0");
        if (ept_cap < 0.0) throw std::invalid_argument("ept_cap must be >= 0");
    }
};

/// Component losses of one batch. Components that a variant does not use are
/// constant zeros so logging stays uniform.
struct LossBreakdown {
    Tensor ce, ept, apt, srpt, total;

    double ce_value() const { return ce.value(); }
    double ept_value() const { return ept.value(); }
    double apt_value() const { return apt.value(); }
    double srpt_value() const { return srpt.value(); }
    double total_value() const { return total.value(); }
};

// ---------------------------------------------------------------------------
// Individual targets
// ---------------------------------------------------------------------------

/// Push target: negated mean over the batch of the per-dimension mean squared
/// distance between the two views' pooled embedding outputs. Always <= 0;
/// gradients flow into both views.
inline Tensor ept_loss(const std::vector<Tensor>& pooled_x, const std::vector<Tensor>& pooled_xa,
                       double per_pair_cap = 0.0) {
    if (pooled_x.empty() || pooled_x.size() != pooled_xa.size()) {
        throw std::invalid_argument("ept_loss: batch sizes differ (" + std::to_string(pooled_x.size()) + " vs " +
                                    std::to_string(pooled_xa.size()) + ")");
    }
    std::vector<Tensor> terms;
    terms.reserve(pooled_x.size());
    for (std::size_t i = 0; i < pooled_x.size(); ++i) {
        Tensor gap = mse(pooled_x[i], pooled_xa[i]);
        if (per_pair_cap > 0.0) gap = clamp_max(gap, per_pair_cap);
        terms.push_back(gap);
    }
    return negate(average(terms));
}

/// Pull target: mean over pairs and heads of the masked mean squared
/// difference between post-softmax attention matrices at one layer.
inline Tensor apt_loss(const std::vector<std::vector<Tensor>>& attn_x, const std::vector<std::vector<Tensor>>& attn_xa,
                       const std::vector<Mask>& valid) {
    if (attn_x.empty() || attn_x.size() != attn_xa.size() || attn_x.size() != valid.size()) {
        throw std::invalid_argument("apt_loss: batch sizes differ");
    }
    std::vector<Tensor> pair_terms;
    pair_terms.reserve(attn_x.size());
    for (std::size_t p = 0; p < attn_x.size(); ++p) {
        if (attn_x[p].size() != attn_xa[p].size() || attn_x[p].empty()) {
            throw std::invalid_argument("apt_loss: head counts differ within pair " + std::to_string(p));
        }
        const int len = attn_x[p][0].shape()[0];
        if (attn_xa[p][0].shape()[0] != len || static_cast<int>(valid[p].size()) != len) {
            throw std::invalid_argument("apt_loss: sequence lengths differ within pair " + std::to_string(p));
        }
        Mask cell_mask(static_cast<std::size_t>(len) * static_cast<std::size_t>(len), 0);
        for (int r = 0; r < len; ++r) {
            if (!valid[p][static_cast<std::size_t>(r)]) continue;
            for (int c = 0; c < len; ++c) {
                cell_mask[static_cast<std::size_t>(r) * len + c] = valid[p][static_cast<std::size_t>(c)];
            }
        }
        std::vector<Tensor> head_terms;
        head_terms.reserve(attn_x[p].size());
        for (std::size_t h = 0; h < attn_x[p].size(); ++h) {
            head_terms.push_back(mse(attn_x[p][h], attn_xa[p][h], &cell_mask));
        }
        pair_terms.push_back(average(head_terms));
    }
    return average(pair_terms);
}

/// Robust target: both views' cross-entropies per pair, normalized by |B|.
inline Tensor ce_pair_loss(const std::vector<Tensor>& probs_x, const std::vector<Tensor>& probs_xa,
                           const std::vector<int>& labels) {
    if (probs_x.empty() || probs_x.size() != probs_xa.size() || probs_x.size() != labels.size()) {
        throw std::invalid_argument("ce_pair_loss: batch sizes differ");
    }
    std::vector<Tensor> terms;
    terms.reserve(probs_x.size());
    for (std::size_t i = 0; i < probs_x.size(); ++i) {
        terms.push_back(add(cross_entropy(probs_x[i], labels[i]), cross_entropy(probs_xa[i], labels[i])));
    }
    return average(terms);
}

/// Replacement pull target: mean squared distance between mean-pooled
/// mid-layer sentence representations. Same arithmetic as the push target
/// without the negation.
inline Tensor srpt_loss(const std::vector<Tensor>& pooled_x, const std::vector<Tensor>& pooled_xa) {
    if (pooled_x.empty() || pooled_x.size() != pooled_xa.size()) {
        throw std::invalid_argument("srpt_loss: batch sizes differ (" + std::to_string(pooled_x.size()) + " vs " +
                                    std::to_string(pooled_xa.size()) + ")");
    }
    std::vector<Tensor> terms;
    terms.reserve(pooled_x.size());
    for (std::size_t i = 0; i < pooled_x.size(); ++i) terms.push_back(mse(pooled_x[i], pooled_xa[i]));
    return average(terms);
}

/// Noise target helper: adds i.i.d. N(0, sigma^2) to every valid row of an
/// embedding output. Contributes no loss term of its own.
inline Tensor nt_perturb(const Tensor& embedding_output, const Mask& valid, double sigma, RngStream& rng) {
    if (sigma <= 0.0) throw std::invalid_argument("nt_perturb: sigma must be > 0");
    if (embedding_output.shape().size() != 2 ||
        static_cast<int>(valid.size()) != embedding_output.shape()[0]) {
        throw std::invalid_argument("nt_perturb: mask does not match embedding rows");
    }
    const int rows = embedding_output.shape()[0];
    const int cols = embedding_output.shape()[1];
    std::vector<double> noise(embedding_output.values().size(), 0.0);
    for (int r = 0; r < rows; ++r) {
        if (!valid[static_cast<std::size_t>(r)]) continue;
        for (int c = 0; c < cols; ++c) noise[static_cast<std::size_t>(r) * cols + c] = rng.gaussian(0.0, sigma);
    }
    return shift(embedding_output, noise);
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

namespace detail {

inline Mask pooling_mask(const TokenizedInput& in, PoolingScope scope) {
    if (scope == PoolingScope::all_valid) return in.valid;
    Mask mask = in.valid;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const int id = in.token_ids[i];
        if (id == Vocabulary::kCls || id == Vocabulary::kSep) mask[i] = 0;
    }
    bool any = false;
    for (auto m : mask) any = any || (m != 0);
    if (!any) return in.valid;  // degenerate sentence of only specials
    return mask;
}

}  // namespace detail

/// Full objective for one collated batch with tied weights across the views.
///
/// Variant table:
///   ept_apt   ce + alpha * ept + beta * apt
///   rsda      ce over augmented pairs only
///   ce_only   single-view cross-entropy, augmented side ignored
///   nt_apt    ce + beta * apt with Gaussian-perturbed embeddings, no push term
///   ept_srpt  ce + alpha * ept + beta * srpt
inline LossBreakdown total_loss(const Parameters& params, const PairedBatch& batch, const ObjectiveConfig& obj,
                                const EncodeOptions& opts = {}) {
    obj.validate();
    if (batch.size() == 0) throw std::invalid_argument("total_loss: empty batch");
    const ModelConfig& cfg = params.config;
    const int apt_layer = obj.resolved_apt_layer(cfg);  // 1-based
    const Tensor zero = Tensor::scalar(0.0);

    LossBreakdown out;
    out.ce = zero;
    out.ept = zero;
    out.apt = zero;
    out.srpt = zero;

    if (obj.variant == Variant::ce_only) {
        std::vector<Tensor> terms;
        terms.reserve(static_cast<std::size_t>(batch.size()));
        for (int i = 0; i < batch.size(); ++i) {
            const EncodeOutput enc = encode(params, batch.x[static_cast<std::size_t>(i)], opts);
            terms.push_back(cross_entropy(classify(params, enc.cls_state), batch.labels[static_cast<std::size_t>(i)]));
        }
        out.ce = average(terms);
        out.total = out.ce;
        return out;
    }

    std::vector<Tensor> probs_x, probs_xa;
    std::vector<Tensor> pooled_embed_x, pooled_embed_xa;
    std::vector<Tensor> pooled_mid_x, pooled_mid_xa;
    std::vector<std::vector<Tensor>> attn_x, attn_xa;
    std::vector<Mask> valid_masks;

    for (int i = 0; i < batch.size(); ++i) {
        const TokenizedInput& x = batch.x[static_cast<std::size_t>(i)];
        const TokenizedInput& xa = batch.xa[static_cast<std::size_t>(i)];
        Tensor ex = embed_input(params, x);
        Tensor exa = embed_input(params, xa);
        if (obj.variant == Variant::nt_apt) {
            if (!opts.rng) throw std::invalid_argument("total_loss: nt_apt requires an RNG");
            ex = nt_perturb(ex, x.valid, obj.nt_sigma, *opts.rng);
            exa = nt_perturb(exa, xa.valid, obj.nt_sigma, *opts.rng);
        }
        const EncodeOutput enc_x = run_from_embedding(params, ex, x, opts);
        const EncodeOutput enc_xa = run_from_embedding(params, exa, xa, opts);

        probs_x.push_back(classify(params, enc_x.cls_state));
        probs_xa.push_back(classify(params, enc_xa.cls_state));

        if (obj.variant == Variant::ept_apt || obj.variant == Variant::ept_srpt) {
            const Mask pool_x = detail::pooling_mask(x, obj.pooling);
            const Mask pool_xa = detail::pooling_mask(xa, obj.pooling);
            pooled_embed_x.push_back(mean_pool(enc_x.embedding_output, pool_x));
            pooled_embed_xa.push_back(mean_pool(enc_xa.embedding_output, pool_xa));
        }
        if (obj.variant == Variant::ept_apt || obj.variant == Variant::nt_apt) {
            attn_x.push_back(enc_x.attention[static_cast<std::size_t>(apt_layer - 1)]);
            attn_xa.push_back(enc_xa.attention[static_cast<std::size_t>(apt_layer - 1)]);
            valid_masks.push_back(x.valid);
        }
        if (obj.variant == Variant::ept_srpt) {
            const Mask pool_x = detail::pooling_mask(x, obj.pooling);
            const Mask pool_xa = detail::pooling_mask(xa, obj.pooling);
            pooled_mid_x.push_back(mean_pool(enc_x.hidden[static_cast<std::size_t>(apt_layer - 1)], pool_x));
            pooled_mid_xa.push_back(mean_pool(enc_xa.hidden[static_cast<std::size_t>(apt_layer - 1)], pool_xa));
        }
    }

    out.ce = ce_pair_loss(probs_x, probs_xa, batch.labels);
    switch (obj.variant) {
        case Variant::rsda:
            out.total = out.ce;
            break;
        case Variant::ept_apt:
            out.ept = ept_loss(pooled_embed_x, pooled_embed_xa, obj.ept_cap);
            out.apt = apt_loss(attn_x, attn_xa, valid_masks);
            out.total = add(out.ce, add(scale(out.ept, obj.alpha), scale(out.apt, obj.beta)));
            break;
        case Variant::nt_apt:
            out.apt = apt_loss(attn_x, attn_xa, valid_masks);
            out.total = add(out.ce, scale(out.apt, obj.beta));
            break;
        case Variant::ept_srpt:
            out.ept = ept_loss(pooled_embed_x, pooled_embed_xa, obj.ept_cap);
            out.srpt = srpt_loss(pooled_mid_x, pooled_mid_xa);
            out.total = add(out.ce, add(scale(out.ept, obj.alpha), scale(out.srpt, obj.beta)));
            break;
        case Variant::ce_only:
            throw std::logic_error("unreachable");  // handled above
    }
    return out;
}

}  // namespace pushpull
