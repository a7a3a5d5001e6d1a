// SPDX-License-Identifier: Apache-2.0
//
// Paired expert/lay corpora: JSON Lines ingestion, word-level tokenization,
// stratified splits and deterministic synthetic corpora with heterogeneous
// lay styles.

#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "magical/model.hpp"
#include "magical/random.hpp"

namespace magical {

struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PairedSample {
    std::string id;
    std::string expert;
    std::string lay;
    std::string style;

    bool operator==(const PairedSample&) const = default;
};

using PairedCorpus = std::vector<PairedSample>;

// ---------------------------------------------------------------------------
// Text segmentation

/// Lowercased alphanumeric runs; each punctuation mark is its own token.
inline std::vector<std::string> word_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
            if (std::ispunct(c)) out.emplace_back(1, static_cast<char>(c));
        }
    }
    flush();
    return out;
}

/// Tokens used by the text metrics: lowercased alphanumeric runs only.
inline std::vector<std::string> metric_tokens(const std::string& text) {
    std::vector<std::string> out;
    for (auto& t : word_tokens(text))
        if (!(t.size() == 1 && std::ispunct(static_cast<unsigned char>(t[0])))) out.push_back(std::move(t));
    return out;
}

inline std::string join(const std::vector<std::string>& words, const std::string& sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += sep;
        out += words[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON Lines

inline PairedCorpus parse_jsonl(std::istream& in) {
    PairedCorpus corpus;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw SchemaError("line " + std::to_string(lineno) + ": malformed JSON (" + e.what() + ")");
        }
        if (!j.is_object()) throw SchemaError("line " + std::to_string(lineno) + ": expected a JSON object");
        PairedSample s;
        for (const char* key : {"id", "expert", "lay", "style"}) {
            auto it = j.find(key);
            if (it == j.end()) {
                throw SchemaError("line " + std::to_string(lineno) + ": missing field \"" + key + "\"");
            }
            if (!it->is_string() || it->get<std::string>().empty()) {
                throw SchemaError("line " + std::to_string(lineno) + ": field \"" + key + "\" must be a nonempty string");
            }
        }
        if (j.size() != 4) throw SchemaError("line " + std::to_string(lineno) + ": unexpected extra fields");
        s.id = j["id"];
        s.expert = j["expert"];
        s.lay = j["lay"];
        s.style = j["style"];
        if (!seen.insert(s.id).second) {
            throw IngestionError("line " + std::to_string(lineno) + ": duplicate id \"" + s.id + "\"");
        }
        corpus.push_back(std::move(s));
    }
    return corpus;
}

inline PairedCorpus load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open corpus file " + path);
    return parse_jsonl(in);
}

inline std::string to_jsonl(const PairedCorpus& corpus) {
    std::string out;
    for (const auto& s : corpus) {
        nlohmann::ordered_json j;
        j["id"] = s.id;
        j["expert"] = s.expert;
        j["lay"] = s.lay;
        j["style"] = s.style;
        out += j.dump() + "\n";
    }
    return out;
}

inline void save_jsonl(const PairedCorpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError("cannot write corpus file " + path);
    out << to_jsonl(corpus);
}

/// Distinct style labels in sorted order; position = branch index.
inline std::vector<std::string> style_labels(const PairedCorpus& corpus) {
    std::set<std::string> s;
    for (const auto& x : corpus) s.insert(x.style);
    return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------
// Tokenizer

class Tokenizer {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kSep = 2;
    static constexpr TokenId kEos = 3;

    Tokenizer() : vocab_{"<pad>", "<unk>", "<sep>", "<eos>"} { reindex(); }

    explicit Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
        if (vocab_.size() < 4 || vocab_[0] != "<pad>" || vocab_[1] != "<unk>" || vocab_[2] != "<sep>" ||
            vocab_[3] != "<eos>") {
            throw SchemaError("tokenizer vocabulary must start with <pad> <unk> <sep> <eos>");
        }
        reindex();
    }

    std::size_t size() const { return vocab_.size(); }
    const std::vector<std::string>& vocabulary() const { return vocab_; }

    TokenId id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    const std::string& token(TokenId id) const { return vocab_.at(id); }

    std::vector<TokenId> encode(const std::string& text) const {
        std::vector<TokenId> out;
        for (const auto& w : word_tokens(text)) out.push_back(id(w));
        return out;
    }

    /// Space-joined tokens, stopping at EOS and skipping PAD/SEP.
    std::string decode(std::span<const TokenId> ids) const {
        std::vector<std::string> words;
        for (auto t : ids) {
            if (t == kEos) break;
            if (t == kPad || t == kSep) continue;
            words.push_back(token(t));
        }
        return join(words);
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < vocab_.size(); ++i) {
            if (!index_.emplace(vocab_[i], i).second) throw SchemaError("duplicate vocabulary entry " + vocab_[i]);
        }
    }

    std::vector<std::string> vocab_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Word vocabulary over expert and lay texts; tokens seen fewer than
/// `min_freq` times map to UNK. Ids are ordered by descending frequency,
/// then lexicographically, after the four reserved ids.
inline Tokenizer build_vocab(const PairedCorpus& corpus, std::size_t min_freq = 1) {
    if (corpus.empty()) throw IngestionError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> freq;
    for (const auto& s : corpus) {
        for (const auto& w : word_tokens(s.expert)) ++freq[w];
        for (const auto& w : word_tokens(s.lay)) ++freq[w];
    }
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> vocab{"<pad>", "<unk>", "<sep>", "<eos>"};
    for (const auto& [w, n] : items)
        if (n >= min_freq) vocab.push_back(w);
    return Tokenizer(std::move(vocab));
}

/// A sample as token ids with its style resolved to a branch index.
struct EncodedSample {
    std::string id;
    std::vector<TokenId> expert;
    std::vector<TokenId> lay;
    std::size_t style = 0;
};

inline std::vector<EncodedSample> encode_corpus(const PairedCorpus& corpus, const Tokenizer& tok,
                                                const std::vector<std::string>& styles) {
    std::vector<EncodedSample> out;
    out.reserve(corpus.size());
    for (const auto& s : corpus) {
        auto it = std::find(styles.begin(), styles.end(), s.style);
        if (it == styles.end()) throw IngestionError("sample '" + s.id + "' has unknown style '" + s.style + "'");
        out.push_back({s.id, tok.encode(s.expert), tok.encode(s.lay), static_cast<std::size_t>(it - styles.begin())});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
    PairedCorpus train;
    PairedCorpus test;
    bool stratified = true;
};

/// Deterministic shuffled split, stratified by style. A style with fewer than
/// two samples disables stratification and the split falls back to global.
inline Split split(const PairedCorpus& corpus, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigurationError("split ratio must lie in (0, 1)");
    Rng rng(seed);
    std::map<std::string, std::vector<std::size_t>> by_style;
    for (std::size_t i = 0; i < corpus.size(); ++i) by_style[corpus[i].style].push_back(i);

    Split out;
    std::vector<std::size_t> train_idx, test_idx;
    const bool stratify = std::all_of(by_style.begin(), by_style.end(), [](const auto& kv) { return kv.second.size() >= 2; });
    auto take = [&](std::vector<std::size_t> idx) {
        rng.shuffle(idx.begin(), idx.end());
        const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size())));
        train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    };
    if (stratify) {
        for (auto& [style, idx] : by_style) take(idx);
    } else {
        std::vector<std::size_t> all(corpus.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        take(all);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    for (auto i : train_idx) out.train.push_back(corpus[i]);
    for (auto i : test_idx) out.test.push_back(corpus[i]);
    out.stratified = stratify;
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class LengthTransform { Keep, Truncate, Expand };

/// One lay style: how length changes, whether jargon is replaced by common
/// words, and the opening phrase its lay texts use.
struct StyleSpec {
    std::string name;
    LengthTransform length = LengthTransform::Keep;
    bool simplify_terms = false;
    std::string lead_in;
};

struct PlantedSpec {
    std::size_t layer = 1;
    double strength = 4.0;
};

struct SynthSpec {
    std::vector<StyleSpec> styles;
    std::size_t samples_per_style = 100;
    std::uint64_t seed = 0;
    std::optional<PlantedSpec> planted;
};

namespace synth {

struct Term {
    const char* jargon;
    const char* common;
};

inline constexpr Term kOrgans[] = {{"myocardial", "heart"}, {"renal", "kidney"},   {"hepatic", "liver"},
                                   {"pulmonary", "lung"},   {"cerebral", "brain"}, {"gastric", "stomach"},
                                   {"cutaneous", "skin"},   {"ocular", "eye"}};

inline constexpr Term kConditions[] = {{"infarction", "damage"}, {"insufficiency", "failure"},
                                       {"neoplasia", "growths"}, {"inflammation", "swelling"},
                                       {"fibrosis", "scarring"}, {"thrombosis", "clots"},
                                       {"lesions", "sores"},     {"hemorrhage", "bleeding"}};

inline constexpr Term kDesigns[] = {{"cohort", "group"}, {"trial", "study"}, {"randomized", "random"}};

inline constexpr const char* kDrugs[] = {"aspirin",  "metformin", "atorvastatin", "lisinopril",
                                         "warfarin", "insulin",   "amoxicillin",  "ibuprofen",
                                         "omeprazole", "prednisone", "salbutamol", "heparin"};

inline constexpr const char* kVerbs[] = {"reduced", "lowered", "prevented", "slowed"};
inline constexpr const char* kGroups[] = {"adults", "children", "women", "men", "smokers", "athletes"};
inline constexpr const char* kCounts[] = {"forty", "sixty", "eighty", "ninety", "hundreds", "thousands"};

}  // namespace synth

/// Three contrasting styles: one shortens, one expands with glossary
/// sentences, one swaps jargon for everyday words.
inline std::vector<StyleSpec> default_styles() {
    return {{"cochrane", LengthTransform::Truncate, false, "overall ,"},
            {"elife", LengthTransform::Expand, false, "in this study ,"},
            {"plos", LengthTransform::Keep, true, "put simply ,"}};
}

inline PairedCorpus synth_corpus(const SynthSpec& spec) {
    using namespace synth;
    if (spec.styles.empty()) throw ConfigurationError("synth_corpus: at least one style required");
    PairedCorpus corpus;
    if (spec.samples_per_style == 0) return corpus;
    Rng rng(spec.seed);
    auto pick = [&](const auto& arr) -> const auto& { return arr[rng.index(std::size(arr))]; };

    for (std::size_t i = 0; i < spec.samples_per_style; ++i) {
        for (std::size_t s = 0; s < spec.styles.size(); ++s) {
            const auto& style = spec.styles[s];
            const Term organ = pick(kOrgans);
            const Term cond = pick(kConditions);
            const Term design = pick(kDesigns);
            const char* drug = pick(kDrugs);
            const char* verb = pick(kVerbs);
            const char* group = pick(kGroups);
            const char* count = pick(kCounts);

            auto term = [&](const Term& t, bool simple) { return std::string(simple ? t.common : t.jargon); };
            auto first = [&](bool simple) {
                return std::string(drug) + " " + verb + " " + term(organ, simple) + " " + term(cond, simple) +
                       " in " + group + " .";
            };
            auto second = [&](bool simple) {
                return "the " + term(design, simple) + " enrolled " + count + " patients .";
            };

            const std::string expert = first(false) + " " + second(false);
            std::string lay = style.lead_in.empty() ? std::string() : style.lead_in + " ";
            switch (style.length) {
                case LengthTransform::Truncate: lay += first(style.simplify_terms); break;
                case LengthTransform::Keep: lay += first(style.simplify_terms) + " " + second(style.simplify_terms); break;
                case LengthTransform::Expand:
                    lay += first(style.simplify_terms) + " " + second(style.simplify_terms) + " " + cond.jargon +
                           " means " + cond.common + " .";
                    break;
            }
            PairedSample sample;
            sample.id = style.name + "-" + std::to_string(i);
            sample.expert = expert;
            sample.lay = lay;
            sample.style = style.name;
            corpus.push_back(std::move(sample));
        }
    }
    return corpus;
}

/// Planted probe fixture for a model: the pair-consistency feature lands on
/// the activation of `spec.layer` along a seeded unit direction.
inline PlantedSignal make_planted_signal(const PlantedSpec& spec, std::size_t d_model, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x91A));
    PlantedSignal p;
    p.layer = spec.layer;
    p.strength = spec.strength;
    p.separator = Tokenizer::kSep;
    p.direction.resize(d_model);
    double norm = 0.0;
    for (auto& v : p.direction) {
        v = rng.normal();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : p.direction) v /= norm;
    return p;
}

}  // namespace magical
