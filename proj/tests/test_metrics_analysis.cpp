// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "magical/metrics.hpp"
#include "magical/random.hpp"

using namespace magical;

namespace {

Tokens toks(const std::string& s) { return metric_tokens(s); }

// Independent BLEU: n-grams keyed as joined strings, counts by linear scans.
double bleu_oracle(const Tokens& c, const Tokens& r) {
    if (c.empty()) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        std::vector<std::string> cg, rg;
        for (std::size_t i = 0; i + n <= c.size(); ++i) cg.push_back(join({c.begin() + i, c.begin() + i + n}, "|"));
        for (std::size_t i = 0; i + n <= r.size(); ++i) rg.push_back(join({r.begin() + i, r.begin() + i + n}, "|"));
        std::vector<std::string> seen;
        double hits = 0.0;
        for (const auto& g : cg) {
            if (std::find(seen.begin(), seen.end(), g) != seen.end()) continue;
            seen.push_back(g);
            hits += std::min(std::count(cg.begin(), cg.end(), g), std::count(rg.begin(), rg.end(), g));
        }
        double p = cg.empty() ? 0.0 : hits / static_cast<double>(cg.size());
        if (p == 0.0) p = 1.0 / (2.0 * std::max<double>(1.0, static_cast<double>(cg.size())));
        log_sum += 0.25 * std::log(p);
    }
    const double bp = c.size() > r.size() ? 1.0 : std::exp(1.0 - static_cast<double>(r.size()) / static_cast<double>(c.size()));
    return bp * std::exp(log_sum);
}

// Longest common subsequence by enumerating every subsequence of a.
std::size_t lcs_exhaustive(const Tokens& a, const Tokens& b) {
    std::size_t best = 0;
    for (std::size_t mask = 0; mask < (std::size_t{1} << a.size()); ++mask) {
        std::size_t j = 0, len = 0;
        bool ok = true;
        for (std::size_t i = 0; i < a.size() && ok; ++i) {
            if (!(mask >> i & 1)) continue;
            while (j < b.size() && b[j] != a[i]) ++j;
            if (j == b.size()) ok = false;
            else { ++j; ++len; }
        }
        if (ok) best = std::max(best, len);
    }
    return best;
}

Tokens random_tokens(Rng& rng, std::size_t max_len) {
    static const std::vector<std::string> words{"a", "b", "c", "d", "e", "f"};
    Tokens t(1 + rng.index(max_len));
    for (auto& w : t) w = words[rng.index(words.size())];
    return t;
}

}  // namespace

TEST(Rouge, HandExamples) {
    EXPECT_NEAR(rouge_n(toks("the cat sat"), toks("the cat ran"), 1).f1, 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(rouge_n(toks("the cat sat"), toks("the cat ran"), 2).f1, 0.5, 1e-15);
    const auto same = rouge_n(toks("a b c"), toks("a b c"), 2);
    EXPECT_EQ(same.precision, 1.0);
    EXPECT_EQ(same.recall, 1.0);
    EXPECT_EQ(same.f1, 1.0);
    EXPECT_EQ(rouge_n(toks("x y"), toks("p q"), 1).f1, 0.0);
    const auto empty = rouge_n({}, toks("a"), 1);
    EXPECT_TRUE(empty.empty);
    EXPECT_EQ(empty.f1, 0.0);
    EXPECT_THROW(rouge_n(toks("a"), toks("a"), 0), ConfigurationError);
}

TEST(Rouge, LcsExamplesAndOracle) {
    EXPECT_NEAR(rouge_l(toks("the cat sat"), toks("the cat ran")).f1, 2.0 / 3.0, 1e-15);
    EXPECT_EQ(lcs_length(toks("a b c d e"), toks("e d c b a")), 1u);
    EXPECT_EQ(rouge_l(toks("one two"), toks("one two")).f1, 1.0);
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        auto a = random_tokens(rng, 8), b = random_tokens(rng, 8);
        const auto l = lcs_length(a, b);
        EXPECT_EQ(l, lcs_exhaustive(a, b));
        // At least as long as any common contiguous run.
        std::size_t run = 0;
        for (std::size_t x = 0; x < a.size(); ++x)
            for (std::size_t y = 0; y < b.size(); ++y) {
                std::size_t k = 0;
                while (x + k < a.size() && y + k < b.size() && a[x + k] == b[y + k]) ++k;
                run = std::max(run, k);
            }
        EXPECT_GE(l, run);
    }
}

TEST(Rouge, SwapExchangesPrecisionAndRecall) {
    Rng rng(4);
    for (int i = 0; i < 100; ++i) {
        auto a = random_tokens(rng, 10), b = random_tokens(rng, 10);
        for (std::size_t n : {1, 2}) {
            const auto ab = rouge_n(a, b, n), ba = rouge_n(b, a, n);
            EXPECT_EQ(ab.precision, ba.recall);
            EXPECT_EQ(ab.f1, ba.f1);
            EXPECT_GE(ab.f1, 0.0);
            EXPECT_LE(ab.f1, 1.0);
        }
    }
}

TEST(Bleu, ClosedFormsAndBounds) {
    EXPECT_NEAR(bleu(toks("a b c d e f"), toks("a b c d e f")), 1.0, 1e-15);
    const auto ref = toks("w1 w2 w3 w4 w5 w6 w7 w8 w9 w10");
    const Tokens cand(ref.begin(), ref.begin() + 5);
    const auto r = bleu_detail(cand, ref);
    EXPECT_NEAR(r.brevity_penalty, std::exp(-1.0), 1e-15);
    EXPECT_NEAR(r.score, 0.367879, 1e-6);
    EXPECT_TRUE(bleu_detail({}, ref).empty);
    EXPECT_EQ(bleu({}, ref), 0.0);

    BleuOptions strict;
    strict.smoothing = false;
    EXPECT_EQ(bleu(toks("a b x y"), toks("a b c d"), strict), 0.0);
    EXPECT_GT(bleu(toks("a b x y"), toks("a b c d")), 0.0);
    BleuOptions bad;
    bad.weights = {0.5, 0.5, 0.5, 0.5};
    EXPECT_THROW(bleu(ref, ref, bad), ConfigurationError);
}

TEST(Bleu, MatchesDirectFormulaOracle) {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        auto c = random_tokens(rng, 12), r = random_tokens(rng, 12);
        const auto d = bleu_detail(c, r);
        EXPECT_NEAR(d.score, bleu_oracle(c, r), 1e-9);
        EXPECT_LE(d.brevity_penalty, 1.0);
        EXPECT_GE(d.score, 0.0);
        EXPECT_LE(d.score, 1.0);
        for (double p : d.precisions) EXPECT_LE(d.score, std::pow(p, 0.25) + 1e-12);
    }
}

TEST(Readability, WordsPerSentence) {
    EXPECT_EQ(avg_word_count("Hello world. Foo bar baz.").value, 2.5);
    const auto one = avg_word_count("hello");
    EXPECT_EQ(one.value, 1.0);
    EXPECT_FALSE(one.undefined);
    EXPECT_EQ(avg_word_count("a b c d e. f g h i j! k l m n o? p q r s t.").value, 5.0);
    // A point inside a number does not end a sentence ("3", "5" are two words).
    EXPECT_EQ(avg_word_count("3.5 mg was given.").value, 5.0);
    const auto none = avg_word_count("...");
    EXPECT_TRUE(none.undefined);
    EXPECT_EQ(none.value, 0.0);
}

TEST(Readability, DcrsWeightsAndStandIns) {
    const DcrsScorers fixed{[](const std::string&) { return 0.2; }, [](const std::string&) { return 0.4; },
                            [](const std::string&) { return 0.6; }, [](const std::string&) { return 0.8; }};
    EXPECT_NEAR(dcrs("x", DcrsWeights{}, fixed), 0.5, 1e-15);
    EXPECT_EQ(dcrs("x", DcrsWeights{1.0, 0.0, 0.0, 0.0}, fixed), 0.2);
    const DcrsScorers zero{[](const std::string&) { return 0.0; }, [](const std::string&) { return 0.0; },
                           [](const std::string&) { return 0.0; }, [](const std::string&) { return 0.0; }};
    EXPECT_EQ(dcrs("x", DcrsWeights{}, zero), 0.0);
    EXPECT_THROW(dcrs("x", DcrsWeights{0.5, 0.5, 0.5, 0.0}, fixed), ConfigurationError);

    const std::string jargon = "nephrotoxicity attenuated glomerular hyperfiltration in normotensive cohorts.";
    const std::string plain = "the pill helps the kidney work well in people.";
    EXPECT_GT(readability::lexical(jargon), readability::lexical(plain));
    for (const auto& t : {jargon, plain}) {
        const double v = dcrs(t);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    ConstantJudge judge(0.7);
    EXPECT_EQ(judge.judge("text"), 0.7);
    EXPECT_EQ(judge.queries().size(), 1u);
}

TEST(Heterogeneity, QuantilesAndDirection) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(1 + rng.index(20));
        for (auto& x : v) x = rng.normal();
        auto sorted = v;
        std::sort(sorted.begin(), sorted.end());
        for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            const std::size_t rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
            EXPECT_EQ(quantile(v, p), sorted[rank == 0 ? 0 : rank - 1]);
        }
    }

    const auto corpus = synth_corpus({default_styles(), 30, 1, std::nullopt});
    const auto t = heterogeneity_report(corpus);
    auto median = [&](const std::string& style, const std::string& side) {
        for (const auto& r : t.rows)
            if (r[0] == style && r[1] == side && r[2] == "words") return std::stod(r[6]);
        return -1.0;
    };
    EXPECT_LT(median("cochrane", "lay"), median("cochrane", "expert"));
    EXPECT_GT(median("elife", "lay"), median("elife", "expert"));

    PairedCorpus twin;
    for (const auto& s : corpus)
        if (s.style == "plos") {
            twin.push_back(s);
            auto copy = s;
            copy.id += "-copy";
            copy.style = "plos2";
            twin.push_back(copy);
        }
    const auto tt = heterogeneity_report(twin);
    ASSERT_EQ(tt.rows.size(), 12u);
    for (std::size_t i = 0; i < 6; ++i)
        EXPECT_TRUE(std::equal(tt.rows[i].begin() + 1, tt.rows[i].end(), tt.rows[i + 6].begin() + 1));
}

TEST(Subspace, RecoversPlantedPlane) {
    Rng rng(7);
    const std::size_t d = 12, m = 40;
    // Orthonormal p1, p2 by Gram-Schmidt on random vectors.
    std::vector<double> p1(d), p2(d);
    for (auto& x : p1) x = rng.normal();
    for (auto& x : p2) x = rng.normal();
    detail::normalize(p1);
    const double pr = detail::vdot(p1, p2);
    for (std::size_t j = 0; j < d; ++j) p2[j] -= pr * p1[j];
    detail::normalize(p2);
    Matrix e(m, std::vector<double>(d)), l(m, std::vector<double>(d));
    for (std::size_t i = 0; i < m; ++i) {
        const double a = 3.0 * rng.normal(), b = rng.normal(), c = 3.0 * rng.normal(), dd = rng.normal();
        for (std::size_t j = 0; j < d; ++j) {
            e[i][j] = a * p1[j] + b * p2[j];
            l[i][j] = c * p1[j] + dd * p2[j];
        }
    }
    const auto s = semantic_subspace(e, l);
    EXPECT_NEAR(detail::vdot(s.u1, s.u1), 1.0, 1e-9);
    EXPECT_NEAR(detail::vdot(s.u2, s.u2), 1.0, 1e-9);
    EXPECT_NEAR(detail::vdot(s.u1, s.u2), 0.0, 1e-9);
    // Each recovered direction lies in span(p1, p2): its residual is ~0.
    for (const auto* u : {&s.u1, &s.u2}) {
        const double a = detail::vdot(*u, p1), b = detail::vdot(*u, p2);
        EXPECT_NEAR(a * a + b * b, 1.0, 1e-12);
    }
    // A vector in the span (relative to the centre) projects losslessly.
    std::vector<double> v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = s.center[j] + 0.7 * s.u1[j] - 1.3 * s.u2[j];
    const auto [x, y] = s.project(v);
    EXPECT_NEAR(x, 0.7, 1e-9);
    EXPECT_NEAR(y, -1.3, 1e-9);
}

TEST(Subspace, IdenticalCloudsAndDegenerateInput) {
    Rng rng(8);
    Matrix e(10, std::vector<double>(5));
    for (auto& r : e)
        for (auto& x : r) x = rng.normal();
    const auto s = semantic_subspace(e, e);
    EXPECT_EQ(s.expert_points, s.lay_points);
    Matrix line(6, std::vector<double>(4, 0.0));
    for (std::size_t i = 0; i < 6; ++i) line[i][0] = static_cast<double>(i);
    EXPECT_THROW(semantic_subspace(line, line), DegenerateSubspaceError);
}

TEST(CrossCorrelation, Oracles) {
    Rng rng(9);
    const std::size_t m = 1000, r = 6;
    Matrix e(m, std::vector<double>(r)), l(m, std::vector<double>(r));
    for (auto& row : e)
        for (auto& x : row) x = rng.normal();
    for (auto& row : l)
        for (auto& x : row) x = rng.normal();
    const auto self = cross_correlation(e, e);
    for (std::size_t a = 0; a < r; ++a) EXPECT_NEAR(self.c[a][a], 1.0, 1e-12);
    const auto indep = cross_correlation(e, l);
    for (const auto& row : indep.c)
        for (double v : row) EXPECT_LT(std::abs(v), 0.15);

    // Centre and orthogonalise the columns of e so that distinct columns are
    // exactly uncorrelated; permuting them then yields a permutation matrix.
    Matrix q = e;
    for (std::size_t a = 0; a < r; ++a) {
        double mu = 0.0;
        for (const auto& row : q) mu += row[a] / static_cast<double>(m);
        for (auto& row : q) row[a] -= mu;
        for (std::size_t b = 0; b < a; ++b) {
            double num = 0.0, den = 0.0;
            for (const auto& row : q) {
                num += row[a] * row[b];
                den += row[b] * row[b];
            }
            for (auto& row : q) row[a] -= num / den * row[b];
        }
    }
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Matrix p(m, std::vector<double>(r));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t b = 0; b < r; ++b) p[i][b] = q[i][perm[b]];
    const auto c = cross_correlation(q, p);
    for (std::size_t a = 0; a < r; ++a)
        for (std::size_t b = 0; b < r; ++b) EXPECT_NEAR(c.c[a][b], perm[b] == a ? 1.0 : 0.0, 1e-12);

    for (auto& row : l) row[2] = 4.0;
    const auto z = cross_correlation(e, l);
    EXPECT_EQ(z.zero_variance_lay, std::vector<std::size_t>{2});
    for (std::size_t a = 0; a < r; ++a) EXPECT_EQ(z.c[a][2], 0.0);
}
