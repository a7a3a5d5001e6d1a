// SPDX-License-Identifier: Apache-2.0
//
// Text metrics (ROUGE-N, ROUGE-L, BLEU, words per sentence, a composite
// readability score), corpus heterogeneity summaries, and representation
// analyses (top-2 singular directions, cross-correlation).

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <cctype>
#include <string>
#include <vector>

#include "magical/corpus.hpp"
#include "magical/table.hpp"

namespace magical {

using Tokens = std::vector<std::string>;
using Matrix = std::vector<std::vector<double>>;

struct MetricScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool empty = false;  // candidate or reference had no units to compare
};

inline double f1_score(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

inline std::map<Tokens, std::size_t> ngram_counts(const Tokens& toks, std::size_t n) {
    std::map<Tokens, std::size_t> counts;
    if (n == 0 || toks.size() < n) return counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[Tokens(toks.begin() + i, toks.begin() + i + n)];
    return counts;
}

/// Σ over n-grams of min(count in a, count in b).
inline std::size_t clipped_overlap(const std::map<Tokens, std::size_t>& cand, const std::map<Tokens, std::size_t>& ref) {
    std::size_t hits = 0;
    for (const auto& [g, c] : cand) {
        auto it = ref.find(g);
        if (it != ref.end()) hits += std::min(c, it->second);
    }
    return hits;
}

inline MetricScore rouge_n(const Tokens& cand, const Tokens& ref, std::size_t n) {
    if (n < 1) throw ConfigurationError("rouge_n: n must be >= 1");
    MetricScore s;
    const std::size_t nc = cand.size() >= n ? cand.size() - n + 1 : 0;
    const std::size_t nr = ref.size() >= n ? ref.size() - n + 1 : 0;
    if (nc == 0 || nr == 0) {
        s.empty = true;
        return s;
    }
    const double hits = static_cast<double>(clipped_overlap(ngram_counts(cand, n), ngram_counts(ref, n)));
    s.precision = hits / static_cast<double>(nc);
    s.recall = hits / static_cast<double>(nr);
    s.f1 = f1_score(s.precision, s.recall);
    return s;
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline MetricScore rouge_l(const Tokens& cand, const Tokens& ref) {
    MetricScore s;
    if (cand.empty() || ref.empty()) {
        s.empty = true;
        return s;
    }
    const double l = static_cast<double>(lcs_length(cand, ref));
    s.precision = l / static_cast<double>(cand.size());
    s.recall = l / static_cast<double>(ref.size());
    s.f1 = f1_score(s.precision, s.recall);
    return s;
}

struct BleuOptions {
    std::size_t max_n = 4;
    std::vector<double> weights;  // empty: uniform 1/max_n
    bool smoothing = true;        // p_n = 0 becomes 1 / (2 · max(1, candidate n-grams))
};

struct BleuResult {
    double score = 0.0;
    double brevity_penalty = 0.0;
    std::vector<double> precisions;
    bool empty = false;
};

inline BleuResult bleu_detail(const Tokens& cand, const Tokens& ref, const BleuOptions& opt = {}) {
    std::vector<double> w = opt.weights.empty() ? std::vector<double>(opt.max_n, 1.0 / static_cast<double>(opt.max_n))
                                                : opt.weights;
    if (w.size() != opt.max_n) throw ConfigurationError("bleu: one weight per n-gram order required");
    double wsum = 0.0;
    for (double x : w) wsum += x;
    if (std::abs(wsum - 1.0) > 1e-9) throw ConfigurationError("bleu: weights must sum to 1");

    BleuResult r;
    if (cand.empty()) {
        r.empty = true;
        return r;
    }
    const double c = static_cast<double>(cand.size()), len_ref = static_cast<double>(ref.size());
    r.brevity_penalty = c > len_ref ? 1.0 : std::exp(1.0 - len_ref / c);
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= opt.max_n; ++n) {
        const std::size_t total = cand.size() >= n ? cand.size() - n + 1 : 0;
        const std::size_t hits = clipped_overlap(ngram_counts(cand, n), ngram_counts(ref, n));
        double p = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
        if (p == 0.0) {
            if (!opt.smoothing) {
                r.precisions.push_back(0.0);
                r.score = 0.0;
                return r;
            }
            p = 1.0 / (2.0 * static_cast<double>(std::max<std::size_t>(1, total)));
        }
        r.precisions.push_back(p);
        log_sum += w[n - 1] * std::log(p);
    }
    r.score = r.brevity_penalty * std::exp(log_sum);
    return r;
}

inline double bleu(const Tokens& cand, const Tokens& ref, const BleuOptions& opt = {}) {
    return bleu_detail(cand, ref, opt).score;
}

struct TextScores {
    double rouge1 = 0.0, rouge2 = 0.0, rougeL = 0.0, bleu = 0.0;
};

/// F1 of ROUGE-1/2/L and BLEU for one generated text against its reference.
inline TextScores score_text(const std::string& generated, const std::string& reference) {
    const auto c = metric_tokens(generated), r = metric_tokens(reference);
    return {rouge_n(c, r, 1).f1, rouge_n(c, r, 2).f1, rouge_l(c, r).f1, bleu(c, r)};
}

// ---------------------------------------------------------------------------
// Readability

struct WordsPerSentence {
    double value = 0.0;
    bool undefined = false;  // no sentence found; value falls back to total words
};

/// Word tokens over sentences; a sentence ends at . ! or ? followed by
/// whitespace or the end of the text, and trailing unterminated words form a
/// final sentence.
inline WordsPerSentence avg_word_count(const std::string& text) {
    const std::size_t words = metric_tokens(text).size();
    std::size_t sentences = 0;
    bool words_since_boundary = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const unsigned char ch = static_cast<unsigned char>(text[i]);
        if (std::isalnum(ch)) words_since_boundary = true;
        const bool terminator = ch == '.' || ch == '!' || ch == '?';
        if (terminator && (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])))) {
            if (words_since_boundary) ++sentences;
            words_since_boundary = false;
        }
    }
    if (words_since_boundary) ++sentences;
    if (sentences == 0) return {static_cast<double>(words), true};
    return {static_cast<double>(words) / static_cast<double>(sentences), false};
}

struct DcrsWeights {
    double alpha = 0.25, beta = 0.25, gamma = 0.25, delta = 0.25;

    void validate() const {
        for (double w : {alpha, beta, gamma, delta})
            if (w < 0.0) throw ConfigurationError("DCRS weights must be non-negative");
        if (std::abs(alpha + beta + gamma + delta - 1.0) > 1e-9) throw ConfigurationError("DCRS weights must sum to 1");
    }
};

using ComponentScorer = std::function<double(const std::string&)>;

struct DcrsScorers {
    ComponentScorer lexical, syntactic, conceptual, discourse;
};

namespace readability {

inline const std::set<std::string>& easy_words() {
    static const std::set<std::string> words{
        "a",     "about", "after", "all",    "also",  "an",     "and",    "any",    "are",   "as",     "at",
        "be",    "been",  "before", "big",   "body",  "but",    "by",     "can",    "could", "day",    "did",
        "do",    "does",  "down",  "each",   "eye",   "find",   "for",    "from",   "get",   "good",   "group",
        "had",   "has",   "have",  "heart",  "help",  "her",    "his",    "how",    "if",    "in",     "into",
        "is",    "it",    "its",   "just",   "kidney", "know",  "less",   "like",   "liver", "long",   "lower",
        "lung",  "made",  "make",  "many",   "may",   "means",  "men",    "more",   "most",  "much",   "new",
        "no",    "not",   "now",   "of",     "on",    "one",    "only",   "or",     "other", "our",    "out",
        "over",  "people", "pill", "put",    "random", "same",  "see",    "she",    "short", "simply", "skin",
        "so",    "some",  "stomach", "study", "such", "than",   "that",   "the",    "their", "them",   "then",
        "there", "these", "they",  "this",   "those", "time",   "to",     "two",    "up",    "use",    "used",
        "very",  "was",   "way",   "we",     "well",  "were",   "what",   "when",   "which", "while",  "who",
        "will",  "with",  "women", "work",   "would", "year",   "years",  "you",    "your",  "brain",  "children",
        "adults", "swelling", "bleeding", "clots", "sores", "scarring", "damage", "failure", "growths", "overall"};
    return words;
}

inline const std::set<std::string>& discourse_words() {
    static const std::set<std::string> words{
        "i",    "you",  "he",      "she",     "it",        "we",      "they",  "this",   "that",  "these",
        "those", "and", "but",     "because", "so",        "however", "therefore", "then", "also", "although",
        "while", "thus", "overall", "simply",  "moreover", "first",   "finally"};
    return words;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Fraction of word tokens outside the easy-word list.
inline double lexical(const std::string& text) {
    const auto w = metric_tokens(text);
    if (w.empty()) return 0.0;
    std::size_t rare = 0;
    for (const auto& t : w) rare += !easy_words().count(t);
    return clamp01(static_cast<double>(rare) / static_cast<double>(w.size()));
}

/// Words per sentence scaled so that 40 words per sentence maps to 1.
inline double syntactic(const std::string& text) { return clamp01(avg_word_count(text).value / 40.0); }

/// Distinct non-discourse words per word.
inline double conceptual(const std::string& text) {
    const auto w = metric_tokens(text);
    if (w.empty()) return 0.0;
    std::set<std::string> content;
    for (const auto& t : w)
        if (!discourse_words().count(t) && !easy_words().count(t)) content.insert(t);
    return clamp01(static_cast<double>(content.size()) / static_cast<double>(w.size()));
}

/// Pronoun and connective share.
inline double discourse(const std::string& text) {
    const auto w = metric_tokens(text);
    if (w.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& t : w) hits += discourse_words().count(t);
    return clamp01(static_cast<double>(hits) / static_cast<double>(w.size()));
}

}  // namespace readability

inline DcrsScorers default_dcrs_scorers() {
    return {readability::lexical, readability::syntactic, readability::conceptual, readability::discourse};
}

inline double dcrs(const std::string& text, const DcrsWeights& w, const DcrsScorers& s) {
    w.validate();
    return w.alpha * s.lexical(text) + w.beta * s.syntactic(text) + w.gamma * s.conceptual(text) +
           w.delta * s.discourse(text);
}

inline double dcrs(const std::string& text) { return dcrs(text, DcrsWeights{}, default_dcrs_scorers()); }

/// External readability judge; the shipped implementation records each query
/// and answers with a fixed score.
class ReadabilityJudge {
public:
    virtual ~ReadabilityJudge() = default;
    virtual double judge(const std::string& text) = 0;
};

class ConstantJudge final : public ReadabilityJudge {
public:
    explicit ConstantJudge(double score) : score_(score) {}
    double judge(const std::string& text) override {
        queries_.push_back(text);
        return score_;
    }
    const std::vector<std::string>& queries() const { return queries_; }

private:
    double score_;
    std::vector<std::string> queries_;
};

// ---------------------------------------------------------------------------
// Heterogeneity

/// Nearest-rank quantile: the ⌈p·n⌉-th smallest value (the minimum at p = 0).
inline double quantile(std::vector<double> values, double p) {
    if (values.empty()) throw ContractError("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size())));
    return values[rank == 0 ? 0 : std::min(rank, values.size()) - 1];
}

/// Per style and side: five-number summaries of total words, words per
/// sentence and DCRS.
inline Table heterogeneity_report(const PairedCorpus& corpus) {
    Table t;
    t.header = {"source", "side", "metric", "n", "min", "q25", "median", "q75", "max"};
    std::map<std::string, std::vector<const PairedSample*>> groups;
    for (const auto& s : corpus) groups[s.style].push_back(&s);
    for (const auto& [style, samples] : groups) {
        for (const std::string side : {"expert", "lay"}) {
            std::vector<double> words, wps, dc;
            for (const auto* s : samples) {
                const auto& text = side == "expert" ? s->expert : s->lay;
                words.push_back(static_cast<double>(metric_tokens(text).size()));
                wps.push_back(avg_word_count(text).value);
                dc.push_back(dcrs(text));
            }
            for (const auto& [name, vals] :
                 {std::pair{"words", words}, std::pair{"words_per_sentence", wps}, std::pair{"dcrs", dc}}) {
                t.add({style, side, name, std::to_string(vals.size()), num(quantile(vals, 0.0)), num(quantile(vals, 0.25)),
                       num(quantile(vals, 0.5)), num(quantile(vals, 0.75)), num(quantile(vals, 1.0))});
            }
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Representation analyses

struct DegenerateSubspaceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SubspaceProjection {
    std::vector<double> u1, u2;  // orthonormal directions in activation space
    std::vector<double> center;  // column mean of the stacked rows
    std::vector<std::pair<double, double>> expert_points, lay_points;
    double sigma1 = 0.0, sigma2 = 0.0;

    std::pair<double, double> project(std::span<const double> v) const {
        double a = 0.0, b = 0.0;
        for (std::size_t j = 0; j < u1.size(); ++j) {
            a += u1[j] * (v[j] - center[j]);
            b += u2[j] * (v[j] - center[j]);
        }
        return {a, b};
    }
};

namespace detail {

inline double vdot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double normalize(std::vector<double>& v) {
    const double n = std::sqrt(vdot(v, v));
    if (n > 0.0)
        for (auto& x : v) x /= n;
    return n;
}

/// Dominant eigenvector of a symmetric PSD matrix by power iteration.
inline std::pair<std::vector<double>, double> power_iteration(const Matrix& c, double tol = 1e-10,
                                                              std::size_t cap = 10000) {
    const std::size_t d = c.size();
    std::vector<double> v(d), next(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7) + 0.01 * static_cast<double>(i);
    normalize(v);
    double lambda = 0.0;
    for (std::size_t it = 0; it < cap; ++it) {
        for (std::size_t i = 0; i < d; ++i) next[i] = vdot(c[i], v);
        lambda = normalize(next);
        if (lambda == 0.0) return {v, 0.0};
        double diff = 0.0;
        for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::abs(next[i] - v[i]));
        v.swap(next);
        if (diff < tol) break;
    }
    return {v, lambda};
}

}  // namespace detail

/// Top-2 right singular directions of the mean-centred stack of paired
/// expert and lay rows, and both point sets projected onto them.
inline SubspaceProjection semantic_subspace(const Matrix& expert, const Matrix& lay) {
    if (expert.size() != lay.size()) throw ContractError("semantic_subspace: expert and lay rows must pair up");
    if (expert.size() < 2) throw DegenerateSubspaceError("semantic_subspace needs at least two pairs");
    const std::size_t d = expert[0].size();
    Matrix rows = expert;
    rows.insert(rows.end(), lay.begin(), lay.end());
    SubspaceProjection out;
    out.center.assign(d, 0.0);
    for (const auto& r : rows) {
        if (r.size() != d) throw DimensionError("semantic_subspace: ragged rows");
        for (std::size_t j = 0; j < d; ++j) out.center[j] += r[j] / static_cast<double>(rows.size());
    }
    for (auto& r : rows)
        for (std::size_t j = 0; j < d; ++j) r[j] -= out.center[j];
    Matrix gram(d, std::vector<double>(d, 0.0));
    for (const auto& r : rows)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) gram[a][b] += r[a] * r[b];

    auto [v1, l1] = detail::power_iteration(gram);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) gram[a][b] -= l1 * v1[a] * v1[b];
    auto [v2, l2] = detail::power_iteration(gram);
    // Re-orthogonalise against v1 to remove deflation round-off.
    const double proj = detail::vdot(v1, v2);
    for (std::size_t j = 0; j < d; ++j) v2[j] -= proj * v1[j];
    const double n2 = detail::normalize(v2);
    if (!(l1 > 0.0) || l2 <= 1e-12 * l1 || n2 < 1e-6) {
        throw DegenerateSubspaceError("semantic_subspace: centred representations have rank < 2");
    }
    out.u1 = std::move(v1);
    out.u2 = std::move(v2);
    out.sigma1 = std::sqrt(l1);
    out.sigma2 = std::sqrt(std::max(l2, 0.0));
    for (const auto& r : expert) out.expert_points.push_back(out.project(r));
    for (const auto& r : lay) out.lay_points.push_back(out.project(r));
    return out;
}

struct CrossCorrelation {
    Matrix c;
    std::vector<std::size_t> zero_variance_expert, zero_variance_lay;
};

/// Pearson correlation between expert dimension a and lay dimension b over
/// paired samples. Zero-variance dimensions yield zero rows or columns.
inline CrossCorrelation cross_correlation(const Matrix& expert, const Matrix& lay) {
    if (expert.size() != lay.size() || expert.empty()) throw ContractError("cross_correlation: unpaired inputs");
    const std::size_t m = expert.size(), re = expert[0].size(), rl = lay[0].size();
    auto standardize = [m](const Matrix& x, std::size_t r, std::vector<std::size_t>& zero) {
        Matrix z(m, std::vector<double>(r, 0.0));
        for (std::size_t a = 0; a < r; ++a) {
            double mu = 0.0, var = 0.0;
            for (std::size_t i = 0; i < m; ++i) mu += x[i][a];
            mu /= static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) var += (x[i][a] - mu) * (x[i][a] - mu);
            const double sd = std::sqrt(var / static_cast<double>(m));
            if (sd < 1e-300 || sd <= 1e-12 * std::abs(mu)) {
                zero.push_back(a);
                continue;
            }
            for (std::size_t i = 0; i < m; ++i) z[i][a] = (x[i][a] - mu) / sd;
        }
        return z;
    };
    CrossCorrelation out;
    const auto ze = standardize(expert, re, out.zero_variance_expert);
    const auto zl = standardize(lay, rl, out.zero_variance_lay);
    out.c.assign(re, std::vector<double>(rl, 0.0));
    for (std::size_t a = 0; a < re; ++a)
        for (std::size_t b = 0; b < rl; ++b) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += ze[i][a] * zl[i][b];
            out.c[a][b] = s / static_cast<double>(m);
        }
    return out;
}

}  // namespace magical
