#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pushpull/encoder.hpp"

namespace pushpull {

/// One labeled sentence pair.
struct Example {
    std::vector<std::string> premise;
    std::vector<std::string> hypothesis;
    int label = 0;
    std::string lang;
};

/// An original/augmented pair; the augmented sides have identical lengths.
struct PairedExample {
    std::vector<std::string> premise, hypothesis;
    std::vector<std::string> premise_aug, hypothesis_aug;
    int label = 0;
    std::string lang;
};

struct TranslationPair {
    std::string src, tgt, lang;
};

inline std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

/// Word-level vocabulary with fixed reserved ids. Unknown tokens map to
/// [UNK]; id order is frequency-descending, ties lexicographic.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kSep = 2;
    static constexpr int kUnk = 3;

    Vocabulary() {
        for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[UNK]"}) append(t);
    }

    explicit Vocabulary(const std::vector<std::string>& tokens_in_order) : Vocabulary() {
        for (const std::string& t : tokens_in_order) {
            if (index_.count(t)) {
                if (index_.at(t) >= 4) throw std::invalid_argument("Vocabulary: duplicate token '" + t + "'");
                continue;  // reserved tokens may be restated
            }
            append(t);
        }
    }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    friend Vocabulary build_vocab(const std::vector<const std::vector<Example>*>& corpora);

private:
    void append(std::string t) {
        index_.emplace(t, static_cast<int>(tokens_.size()));
        tokens_.push_back(std::move(t));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

inline Vocabulary build_vocab(const std::vector<const std::vector<Example>*>& corpora) {
    bool empty = true;
    std::map<std::string, long long> counts;
    for (const auto* corpus : corpora) {
        for (const Example& ex : *corpus) {
            empty = false;
            for (const std::string& t : ex.premise) ++counts[t];
            for (const std::string& t : ex.hypothesis) ++counts[t];
        }
    }
    if (empty) throw std::invalid_argument("build_vocab: empty corpus");
    std::vector<std::pair<std::string, long long>> items(counts.begin(), counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (auto& [tok, n] : items) v.append(tok);
    return v;
}

inline Vocabulary build_vocab(const std::vector<Example>& corpus) { return build_vocab({&corpus}); }

/// [CLS] s1 [SEP] s2 [SEP] with segment 0 through the first [SEP] and 1
/// afterwards. Over-long pairs lose s2 tokens first, then s1 tokens.
inline TokenizedInput construct_input(const Vocabulary& vocab, const std::vector<std::string>& s1,
                                      const std::vector<std::string>& s2, int max_len) {
    if (s1.empty()) throw std::invalid_argument("construct_input: sentence1 must be non-empty");
    if (max_len < 3) throw std::invalid_argument("construct_input: max_len must be >= 3");
    std::size_t len1 = s1.size();
    std::size_t len2 = s2.size();
    while (len1 + len2 + 3 > static_cast<std::size_t>(max_len) && len2 > 0) --len2;
    if (len2 == 0) {
        while (len1 + 2 > static_cast<std::size_t>(max_len)) --len1;
    }
    TokenizedInput in;
    in.token_ids.push_back(Vocabulary::kCls);
    in.segment_ids.push_back(0);
    for (std::size_t i = 0; i < len1; ++i) {
        in.token_ids.push_back(vocab.id(s1[i]));
        in.segment_ids.push_back(0);
    }
    in.token_ids.push_back(Vocabulary::kSep);
    in.segment_ids.push_back(0);
    if (len2 > 0) {
        for (std::size_t i = 0; i < len2; ++i) {
            in.token_ids.push_back(vocab.id(s2[i]));
            in.segment_ids.push_back(1);
        }
        in.token_ids.push_back(Vocabulary::kSep);
        in.segment_ids.push_back(1);
    }
    in.valid.assign(in.token_ids.size(), 1);
    return in;
}

/// Aligned original/augmented batch; identical per-row masks by construction.
struct PairedBatch {
    std::vector<TokenizedInput> x;
    std::vector<TokenizedInput> xa;
    std::vector<int> labels;

    int size() const { return static_cast<int>(x.size()); }
    int seq_len() const { return x.empty() ? 0 : x.front().length(); }
};

namespace detail {

inline void pad_to(TokenizedInput& in, int target) {
    while (in.length() < target) {
        in.token_ids.push_back(Vocabulary::kPad);
        in.segment_ids.push_back(0);
        in.valid.push_back(0);
    }
}

}  // namespace detail

/// Right-pads every row to the longest row of this batch.
inline PairedBatch collate(const std::vector<std::pair<TokenizedInput, TokenizedInput>>& pairs,
                           const std::vector<int>& labels) {
    if (pairs.empty()) throw std::invalid_argument("collate: empty batch");
    if (pairs.size() != labels.size()) throw std::invalid_argument("collate: labels do not match pairs");
    int max_len = 0;
    for (const auto& [x, xa] : pairs) {
        if (x.length() != xa.length()) {
            throw std::invalid_argument("collate: original/augmented lengths differ (" + std::to_string(x.length()) +
                                        " vs " + std::to_string(xa.length()) + ")");
        }
        max_len = std::max(max_len, x.length());
    }
    PairedBatch batch;
    batch.labels = labels;
    for (const auto& [x, xa] : pairs) {
        TokenizedInput px = x, pxa = xa;
        detail::pad_to(px, max_len);
        detail::pad_to(pxa, max_len);
        batch.x.push_back(std::move(px));
        batch.xa.push_back(std::move(pxa));
    }
    return batch;
}

inline std::vector<PairedExample> as_identity_pairs(const std::vector<Example>& examples) {
    std::vector<PairedExample> out;
    out.reserve(examples.size());
    for (const Example& ex : examples) {
        out.push_back({ex.premise, ex.hypothesis, ex.premise, ex.hypothesis, ex.label, ex.lang});
    }
    return out;
}

// ---------------------------------------------------------------------------
// File formats: dataset JSONL, paired JSONL, translation CSV
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line, const std::string& path, std::size_t line_no) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed JSON record");
    }
    return j;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    return f;
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    return f;
}

}  // namespace detail

inline std::vector<Example> load_examples(const std::string& path) {
    std::ifstream f = detail::open_input(path);
    std::vector<Example> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const nlohmann::json j = detail::parse_jsonl_line(line, path, line_no);
        try {
            Example ex;
            ex.premise = split_tokens(j.at("premise").get<std::string>());
            ex.hypothesis = split_tokens(j.value("hypothesis", std::string()));
            ex.label = j.at("label").get<int>();
            ex.lang = j.value("lang", std::string("l0"));
            out.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline void save_examples(const std::string& path, const std::vector<Example>& examples) {
    std::ofstream f = detail::open_output(path);
    for (const Example& ex : examples) {
        nlohmann::json j{{"premise", join_tokens(ex.premise)},
                         {"hypothesis", join_tokens(ex.hypothesis)},
                         {"label", ex.label},
                         {"lang", ex.lang}};
        f << j.dump() << '\n';
    }
}

inline std::vector<PairedExample> load_paired(const std::string& path) {
    std::ifstream f = detail::open_input(path);
    std::vector<PairedExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const nlohmann::json j = detail::parse_jsonl_line(line, path, line_no);
        try {
            PairedExample ex;
            ex.premise = split_tokens(j.at("premise").get<std::string>());
            ex.hypothesis = split_tokens(j.value("hypothesis", std::string()));
            ex.premise_aug = split_tokens(j.at("premise_aug").get<std::string>());
            ex.hypothesis_aug = split_tokens(j.value("hypothesis_aug", std::string()));
            ex.label = j.at("label").get<int>();
            ex.lang = j.value("lang", std::string("l0"));
            if (ex.premise.size() != ex.premise_aug.size() || ex.hypothesis.size() != ex.hypothesis_aug.size()) {
                throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                         ": augmented sides must preserve sentence lengths");
            }
            out.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline void save_paired(const std::string& path, const std::vector<PairedExample>& pairs) {
    std::ofstream f = detail::open_output(path);
    for (const PairedExample& ex : pairs) {
        nlohmann::json j{{"premise", join_tokens(ex.premise)},
                         {"hypothesis", join_tokens(ex.hypothesis)},
                         {"premise_aug", join_tokens(ex.premise_aug)},
                         {"hypothesis_aug", join_tokens(ex.hypothesis_aug)},
                         {"label", ex.label},
                         {"lang", ex.lang}};
        f << j.dump() << '\n';
    }
}

inline std::vector<TranslationPair> load_translations(const std::string& path) {
    std::ifstream f = detail::open_input(path);
    std::vector<TranslationPair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("src_token", 0) == 0) continue;  // header
        std::istringstream is(line);
        TranslationPair p;
        if (!std::getline(is, p.src, ',') || !std::getline(is, p.tgt, ',') || !std::getline(is, p.lang)) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected src_token,tgt_token,lang");
        }
        out.push_back(std::move(p));
    }
    return out;
}

inline void save_translations(const std::string& path, const std::vector<TranslationPair>& pairs) {
    std::ofstream f = detail::open_output(path);
    f << "src_token,tgt_token,lang\n";
    for (const TranslationPair& p : pairs) f << p.src << ',' << p.tgt << ',' << p.lang << '\n';
}

}  // namespace pushpull
