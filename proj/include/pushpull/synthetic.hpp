#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pushpull/augmentation.hpp"
#include "pushpull/data.hpp"
#include "pushpull/encoder.hpp"
#include "pushpull/rng.hpp"

namespace pushpull {

/// Parameters of the synthetic multilingual corpus. Each concept carries a
/// latent vector; language l realizes it as a surface token whose embedding
/// sits latent + language offset + token noise away, reproducing per-language
/// cluster geometry. cluster_offset and noise are per-coordinate standard
/// deviations in embedding space (concept latents use std 0.02, the encoder
/// init scale). Offset 0 and noise 0 mean the languages coincide entirely,
/// surface forms included.
struct SyntheticSpec {
    int n_concepts = 60;
    int n_languages = 3;
    int synonyms_per_concept = 2;
    int min_sentence_len = 3;
    int max_sentence_len = 6;
    int n_classes = 2;
    int n_train = 2000;
    int n_test = 500;
    double cluster_offset = 0.08;
    double noise = 0.01;
    std::uint64_t label_rule_seed = 7;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_concepts < 2) throw std::invalid_argument("SyntheticSpec: n_concepts must be >= 2");
        if (n_languages < 2) throw std::invalid_argument("SyntheticSpec: n_languages must be >= 2");
        if (synonyms_per_concept < 2) throw std::invalid_argument("SyntheticSpec: synonyms_per_concept must be >= 2");
        if (min_sentence_len < 1 || max_sentence_len < min_sentence_len) {
            throw std::invalid_argument("SyntheticSpec: bad sentence length range");
        }
        if (n_classes < 2) throw std::invalid_argument("SyntheticSpec: n_classes must be >= 2");
        if (n_train < n_classes || n_test < n_classes) {
            throw std::invalid_argument("SyntheticSpec: train/test sizes must cover every class");
        }
        if (cluster_offset < 0.0 || noise < 0.0) {
            throw std::invalid_argument("SyntheticSpec: magnitudes must be >= 0");
        }
    }

    bool languages_collapse() const { return cluster_offset == 0.0 && noise == 0.0; }
};

struct ClusterTokenInfo {
    std::string token;
    int concept_id = 0;
    int lang = 0;
};

/// Everything needed to pre-seed an embedding table with the corpus geometry.
struct ClusterSpec {
    std::uint64_t seed = 0;
    double offset = 0.0;
    double noise = 0.0;
    std::vector<ClusterTokenInfo> tokens;
};

struct SyntheticCorpus {
    std::vector<Example> train;  // language 0 only
    std::vector<std::string> languages;
    std::map<std::string, std::vector<Example>> test_by_lang;
    SynonymDictionary dictionary;
    std::vector<TranslationPair> translations;
    ClusterSpec clusters;
};

namespace detail {

inline std::string lang_tag(int lang) { return "l" + std::to_string(lang); }

inline std::string surface_token(const SyntheticSpec& spec, int concept_id, int lang, int variant = 0) {
    if (spec.languages_collapse() && lang > 0) {
        lang = 0;  // zero offset and noise: language realizations coincide
        variant = 0;
    }
    if (lang == 0) return "c" + std::to_string(concept_id) + "l0v" + std::to_string(variant);
    return "c" + std::to_string(concept_id) + "l" + std::to_string(lang);
}

struct LabelRule {
    std::vector<int> weights;      // +1 / -1 per concept
    std::vector<double> cutpoints; // n_classes - 1 ascending score boundaries

    int label(const std::vector<int>& c1, const std::vector<int>& c2) const {
        double score = 0;
        for (int c : c1) score += weights[static_cast<std::size_t>(c)];
        for (int c : c2) score += weights[static_cast<std::size_t>(c)];
        int out = 0;
        for (double cut : cutpoints) out += (score > cut) ? 1 : 0;
        return out;
    }
};

struct ConceptPair {
    std::vector<int> s1, s2;
    int label = 0;
};

inline std::vector<int> draw_sentence(const SyntheticSpec& spec, RngStream& rng) {
    const int len = spec.min_sentence_len +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_sentence_len - spec.min_sentence_len + 1)));
    std::vector<int> out(static_cast<std::size_t>(len));
    for (int& c : out) c = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_concepts)));
    return out;
}

inline LabelRule make_label_rule(const SyntheticSpec& spec) {
    LabelRule rule;
    // balanced +/-1 weights, seeded shuffle: both signs always present
    rule.weights.assign(static_cast<std::size_t>(spec.n_concepts), -1);
    for (int c = 0; c < (spec.n_concepts + 1) / 2; ++c) rule.weights[static_cast<std::size_t>(c)] = 1;
    RngStream wrng(sub_seed(spec.label_rule_seed, "concept-weights"));
    wrng.shuffle(rule.weights);
    // cutpoints from score quantiles of a pre-sample
    RngStream crng(sub_seed(spec.label_rule_seed, "calibration"));
    std::vector<double> scores;
    scores.reserve(4096);
    for (int i = 0; i < 4096; ++i) {
        double s = 0;
        for (int c : draw_sentence(spec, crng)) s += rule.weights[static_cast<std::size_t>(c)];
        for (int c : draw_sentence(spec, crng)) s += rule.weights[static_cast<std::size_t>(c)];
        scores.push_back(s);
    }
    std::sort(scores.begin(), scores.end());
    for (int k = 1; k < spec.n_classes; ++k) {
        rule.cutpoints.push_back(scores[static_cast<std::size_t>(k) * scores.size() / static_cast<std::size_t>(spec.n_classes)]);
    }
    return rule;
}

/// Draws label-balanced concept pairs (rejection sampling against quotas).
inline std::vector<ConceptPair> draw_balanced(const SyntheticSpec& spec, const LabelRule& rule, int count,
                                              RngStream& rng) {
    std::vector<int> quota(static_cast<std::size_t>(spec.n_classes), count / spec.n_classes);
    for (int k = 0; k < count % spec.n_classes; ++k) ++quota[static_cast<std::size_t>(k)];
    std::vector<ConceptPair> out;
    out.reserve(static_cast<std::size_t>(count));
    long long attempts = 0;
    const long long max_attempts = 2000LL * count;
    while (static_cast<int>(out.size()) < count) {
        if (++attempts > max_attempts) {
            throw std::runtime_error("gen_synthetic_corpus: label rule cannot balance " +
                                     std::to_string(spec.n_classes) + " classes; adjust the spec");
        }
        ConceptPair pair;
        pair.s1 = draw_sentence(spec, rng);
        pair.s2 = draw_sentence(spec, rng);
        pair.label = rule.label(pair.s1, pair.s2);
        if (quota[static_cast<std::size_t>(pair.label)] == 0) continue;
        --quota[static_cast<std::size_t>(pair.label)];
        out.push_back(std::move(pair));
    }
    return out;
}

inline Example realize(const SyntheticSpec& spec, const ConceptPair& pair, int lang) {
    Example ex;
    ex.label = pair.label;
    ex.lang = lang_tag(lang);
    for (int c : pair.s1) ex.premise.push_back(surface_token(spec, c, lang));
    for (int c : pair.s2) ex.hypothesis.push_back(surface_token(spec, c, lang));
    return ex;
}

}  // namespace detail

/// Pure function of the spec: train set (language 0), exact-translation test
/// sets for every language, the synonym dictionary over language-0 variants,
/// translation ground truth, and the cluster geometry for embedding seeding.
inline SyntheticCorpus gen_synthetic_corpus(const SyntheticSpec& spec) {
    spec.validate();
    const detail::LabelRule rule = detail::make_label_rule(spec);
    SyntheticCorpus corpus;
    for (int l = 0; l < spec.n_languages; ++l) corpus.languages.push_back(detail::lang_tag(l));

    RngStream rng(sub_seed(spec.seed, "sentences"));
    const auto train_pairs = detail::draw_balanced(spec, rule, spec.n_train, rng);
    const auto test_pairs = detail::draw_balanced(spec, rule, spec.n_test, rng);
    for (const auto& p : train_pairs) corpus.train.push_back(detail::realize(spec, p, 0));
    for (int l = 0; l < spec.n_languages; ++l) {
        auto& bucket = corpus.test_by_lang[detail::lang_tag(l)];
        bucket.reserve(test_pairs.size());
        for (const auto& p : test_pairs) bucket.push_back(detail::realize(spec, p, l));
    }

    corpus.dictionary.source = "synthetic";
    for (int c = 0; c < spec.n_concepts; ++c) {
        std::vector<std::string> synonyms;
        for (int v = 1; v < spec.synonyms_per_concept; ++v) {
            synonyms.push_back(detail::surface_token(spec, c, 0, v));
        }
        corpus.dictionary.entries[detail::surface_token(spec, c, 0, 0)] = std::move(synonyms);
    }

    for (int l = 1; l < spec.n_languages; ++l) {
        for (int c = 0; c < spec.n_concepts; ++c) {
            corpus.translations.push_back(
                {detail::surface_token(spec, c, 0, 0), detail::surface_token(spec, c, l), detail::lang_tag(l)});
        }
    }

    corpus.clusters.seed = spec.seed;
    corpus.clusters.offset = spec.cluster_offset;
    corpus.clusters.noise = spec.noise;
    std::map<std::string, ClusterTokenInfo> dedup;
    for (int c = 0; c < spec.n_concepts; ++c) {
        for (int v = 0; v < spec.synonyms_per_concept; ++v) {
            const std::string tok = detail::surface_token(spec, c, 0, v);
            dedup.emplace(tok, ClusterTokenInfo{tok, c, 0});
        }
        for (int l = 1; l < spec.n_languages; ++l) {
            const std::string tok = detail::surface_token(spec, c, l);
            dedup.emplace(tok, ClusterTokenInfo{tok, c, l});
        }
    }
    for (auto& [tok, info] : dedup) corpus.clusters.tokens.push_back(info);
    return corpus;
}

/// Overwrites embedding rows of corpus tokens with latent(concept) +
/// offset(language) + per-token noise, deterministically from the cluster
/// seed. Tokens absent from the vocabulary are skipped.
inline void apply_cluster_seed(Parameters& params, const ClusterSpec& clusters, const Vocabulary& vocab) {
    const int d = params.config.hidden;
    std::vector<double>& table = params.tok_embed.values();
    for (const ClusterTokenInfo& info : clusters.tokens) {
        const int id = vocab.id(info.token);
        if (id == Vocabulary::kUnk) continue;
        RngStream lat(sub_seed(clusters.seed, "latent", static_cast<std::uint64_t>(info.concept_id)));
        RngStream off(sub_seed(clusters.seed, "lang-offset", static_cast<std::uint64_t>(info.lang)));
        RngStream tok(sub_seed(clusters.seed, "token-noise:" + info.token));
        for (int j = 0; j < d; ++j) {
            double v = lat.gaussian(0.0, 0.02);
            if (info.lang > 0) v += off.gaussian(0.0, clusters.offset);
            v += tok.gaussian(0.0, clusters.noise);
            table[static_cast<std::size_t>(id) * d + j] = v;
        }
    }
}

inline void save_clusters(const std::string& path, const ClusterSpec& clusters) {
    nlohmann::json tokens = nlohmann::json::array();
    for (const auto& t : clusters.tokens) {
        tokens.push_back({{"token", t.token}, {"concept", t.concept_id}, {"lang", t.lang}});
    }
    nlohmann::json j{{"seed", clusters.seed}, {"offset", clusters.offset}, {"noise", clusters.noise}, {"tokens", tokens}};
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << j.dump(2) << '\n';
}

inline ClusterSpec load_clusters(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error(path + ": malformed JSON");
    ClusterSpec out;
    try {
        out.seed = j.at("seed").get<std::uint64_t>();
        out.offset = j.at("offset").get<double>();
        out.noise = j.at("noise").get<double>();
        for (const auto& t : j.at("tokens")) {
            out.tokens.push_back({t.at("token").get<std::string>(), t.at("concept").get<int>(), t.at("lang").get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return out;
}

/// Writes the whole corpus into a directory with the standard layout:
/// train.jsonl, test_<lang>.jsonl, dictionary.jsonl, translations.csv,
/// clusters.json.
inline void write_corpus(const std::string& dir, const SyntheticCorpus& corpus) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path base(dir);
    save_examples((base / "train.jsonl").string(), corpus.train);
    for (const auto& [lang, examples] : corpus.test_by_lang) {
        save_examples((base / ("test_" + lang + ".jsonl")).string(), examples);
    }
    save_dictionary((base / "dictionary.jsonl").string(), corpus.dictionary);
    save_translations((base / "translations.csv").string(), corpus.translations);
    save_clusters((base / "clusters.json").string(), corpus.clusters);
}

}  // namespace pushpull
