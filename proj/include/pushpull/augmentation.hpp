#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pushpull/data.hpp"
#include "pushpull/rng.hpp"

namespace pushpull {

/// word -> single-token synonyms. Multi-token and self-referential synonyms
/// are dropped at load time so replacement always preserves sequence length.
struct SynonymDictionary {
    std::map<std::string, std::vector<std::string>> entries;
    std::string source;
    std::size_t dropped_synonyms = 0;  // multi-token or headword-equal synonyms discarded

    std::size_t size() const { return entries.size(); }

    const std::vector<std::string>* lookup(const std::string& word) const {
        auto it = entries.find(word);
        return it == entries.end() ? nullptr : &it->second;
    }
};

struct AugmentationPolicy {
    double replace_prob = 0.25;
    int copies = 1;  // K augmented examples per input
    std::uint64_t seed = 0;

    void validate() const {
        if (replace_prob < 0.0 || replace_prob > 1.0) {
            throw std::invalid_argument("AugmentationPolicy: replace_prob must be in [0, 1]");
        }
        if (copies < 1) throw std::invalid_argument("AugmentationPolicy: copies must be >= 1");
    }
};

namespace detail {

inline bool single_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') return false;
    }
    return true;
}

}  // namespace detail

/// Parses a JSONL dictionary: one {"word": w, "synonyms": [...]} per line.
inline SynonymDictionary load_dictionary(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    SynonymDictionary dict;
    dict.source = path;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("word") || !j.contains("synonyms")) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected {\"word\": ..., \"synonyms\": [...]}");
        }
        try {
            const std::string word = j.at("word").get<std::string>();
            std::vector<std::string> kept;
            for (const auto& s : j.at("synonyms")) {
                const std::string syn = s.get<std::string>();
                if (!detail::single_token(syn) || syn == word) {
                    ++dict.dropped_synonyms;
                    continue;
                }
                kept.push_back(syn);
            }
            if (!kept.empty()) dict.entries[word] = std::move(kept);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return dict;
}

inline void save_dictionary(const std::string& path, const SynonymDictionary& dict) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (const auto& [word, synonyms] : dict.entries) {
        f << nlohmann::json{{"word", word}, {"synonyms", synonyms}}.dump() << '\n';
    }
}

/// Seeded uniform subset of floor(scale * size) entries, without replacement.
inline SynonymDictionary scale_dictionary(const SynonymDictionary& dict, double scale, std::uint64_t seed) {
    if (!(scale > 0.0) || scale > 1.0) {
        throw std::invalid_argument("scale_dictionary: scale must lie in (0, 1], got " + std::to_string(scale));
    }
    const std::size_t target = static_cast<std::size_t>(std::floor(scale * static_cast<double>(dict.size())));
    std::vector<std::string> words;
    words.reserve(dict.size());
    for (const auto& [word, synonyms] : dict.entries) words.push_back(word);
    RngStream rng(sub_seed(seed, "dictionary-scale"));
    // partial Fisher-Yates: the first `target` slots become the sample
    for (std::size_t i = 0; i < target; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(words.size() - i));
        std::swap(words[i], words[j]);
    }
    SynonymDictionary out;
    out.source = dict.source;
    for (std::size_t i = 0; i < target; ++i) out.entries[words[i]] = dict.entries.at(words[i]);
    return out;
}

/// Independently replaces each dictionary-covered token with probability p by
/// a uniformly drawn synonym. Length is always preserved.
inline std::vector<std::string> augment_example(const std::vector<std::string>& tokens, const SynonymDictionary& dict,
                                                double replace_prob, RngStream& rng) {
    std::vector<std::string> out = tokens;
    for (std::string& tok : out) {
        const std::vector<std::string>* synonyms = dict.lookup(tok);
        if (!synonyms) continue;
        if (rng.uniform() < replace_prob) {
            tok = (*synonyms)[static_cast<std::size_t>(rng.below(synonyms->size()))];
        }
    }
    return out;
}

/// K independent augmented copies per example; both sentences of the pair are
/// augmented. Per-copy RNG derives from (seed, example index, copy index) so
/// the result does not depend on evaluation order.
inline std::vector<PairedExample> augment_dataset(const std::vector<Example>& dataset, const SynonymDictionary& dict,
                                                  const AugmentationPolicy& policy) {
    policy.validate();
    std::vector<PairedExample> out;
    out.reserve(dataset.size() * static_cast<std::size_t>(policy.copies));
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const Example& ex = dataset[i];
        for (int k = 0; k < policy.copies; ++k) {
            RngStream rng(sub_seed(policy.seed, "augment",
                                   i * static_cast<std::uint64_t>(policy.copies) + static_cast<std::uint64_t>(k)));
            PairedExample pair;
            pair.premise = ex.premise;
            pair.hypothesis = ex.hypothesis;
            pair.premise_aug = augment_example(ex.premise, dict, policy.replace_prob, rng);
            pair.hypothesis_aug = augment_example(ex.hypothesis, dict, policy.replace_prob, rng);
            pair.label = ex.label;
            pair.lang = ex.lang;
            out.push_back(std::move(pair));
        }
    }
    return out;
}

}  // namespace pushpull
