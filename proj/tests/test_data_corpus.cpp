// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "magical/corpus.hpp"

using namespace magical;

namespace {

PairedCorpus parse(const std::string& text) {
    std::istringstream in(text);
    return parse_jsonl(in);
}

std::size_t count_words(const std::string& s) { return metric_tokens(s).size(); }

}  // namespace

TEST(Jsonl, ParsesWellFormedLines) {
    auto c = parse(R"({"id":"a","expert":"Renal failure.","lay":"Kidneys stop.","style":"plos"})"
                   "\n\n"
                   R"({"id":"b","expert":"X y.","lay":"Z.","style":"elife"})"
                   "\n");
    ASSERT_EQ(c.size(), 2u);
    EXPECT_EQ(c[0].id, "a");
    EXPECT_EQ(c[1].style, "elife");
    EXPECT_TRUE(parse("").empty());
}

TEST(Jsonl, RoundTrip) {
    PairedCorpus c{{"1", "e \"quoted\"", "l\ttab", "s"}, {"2", "é", "ü", "t"}};
    EXPECT_EQ(parse(to_jsonl(c)), c);
}

TEST(Jsonl, SchemaErrorsCarryLineNumbers) {
    try {
        parse(R"({"id":"a","expert":"x","lay":"y","style":"s"})"
              "\n"
              R"({"id":"b","expert":"x","style":"s"})");
        FAIL() << "expected SchemaError";
    } catch (const SchemaError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("lay"), std::string::npos);
    }
    EXPECT_THROW(parse(R"({"id":"a","expert":"","lay":"y","style":"s"})"), SchemaError);
    EXPECT_THROW(parse(R"({"id":"a","expert":"x","lay":"y","style":"s","extra":1})"), SchemaError);
    EXPECT_THROW(parse(R"({"id":7,"expert":"x","lay":"y","style":"s"})"), SchemaError);
    EXPECT_THROW(parse("{not json"), SchemaError);
}

TEST(Jsonl, DuplicateIdsRejected) {
    EXPECT_THROW(parse(R"({"id":"a","expert":"x","lay":"y","style":"s"})"
                       "\n"
                       R"({"id":"a","expert":"x","lay":"y","style":"s"})"),
                 IngestionError);
}

TEST(Tokenizer, SegmentsWordsAndPunctuation) {
    EXPECT_EQ(word_tokens("Hello, World!"), (std::vector<std::string>{"hello", ",", "world", "!"}));
    EXPECT_EQ(metric_tokens("Hello, World!"), (std::vector<std::string>{"hello", "world"}));
}

TEST(Tokenizer, ReservedIdsAndStableOrder) {
    PairedCorpus c{{"1", "b a a", "c", "s"}, {"2", "a b", "d", "s"}};
    auto t = build_vocab(c);
    EXPECT_EQ(t.token(0), "<pad>");
    EXPECT_EQ(t.token(2), "<sep>");
    EXPECT_EQ(t.id("a"), 4u);  // most frequent
    EXPECT_EQ(t.id("b"), 5u);
    EXPECT_EQ(t.id("c"), 6u);  // ties broken lexicographically
    EXPECT_EQ(t.id("zzz"), Tokenizer::kUnk);
    EXPECT_EQ(build_vocab(c).vocabulary(), t.vocabulary());
    auto rare = build_vocab(c, 2);
    EXPECT_EQ(rare.size(), 6u);
    EXPECT_EQ(rare.id("c"), Tokenizer::kUnk);
    EXPECT_THROW(build_vocab({}), IngestionError);
}

TEST(Tokenizer, DecodeInvertsEncodeOnNormalizedText) {
    auto corpus = synth_corpus({default_styles(), 5, 1, std::nullopt});
    auto t = build_vocab(corpus);
    for (const auto& s : corpus) {
        EXPECT_EQ(t.decode(t.encode(s.lay)), join(word_tokens(s.lay)));
        EXPECT_EQ(t.decode(t.encode(s.expert)), join(word_tokens(s.expert)));
    }
}

TEST(Split, StratifiedAndDeterministic) {
    auto corpus = synth_corpus({default_styles(), 20, 2, std::nullopt});
    auto a = split(corpus, 0.8, 5), b = split(corpus, 0.8, 5);
    EXPECT_EQ(a.train, b.train);
    EXPECT_TRUE(a.stratified);
    EXPECT_EQ(a.train.size(), 48u);
    EXPECT_EQ(a.test.size(), 12u);
    std::map<std::string, int> per_style;
    for (const auto& s : a.test) ++per_style[s.style];
    for (const auto& [style, n] : per_style) EXPECT_EQ(n, 4) << style;
    std::set<std::string> ids;
    for (const auto& s : a.train) ids.insert(s.id);
    for (const auto& s : a.test) EXPECT_FALSE(ids.count(s.id));
    EXPECT_THROW(split(corpus, 1.0, 0), ConfigurationError);
}

TEST(Split, FallsBackWhenStyleTooSmall) {
    PairedCorpus c{{"1", "a", "b", "x"}, {"2", "a", "b", "y"}, {"3", "a", "b", "y"}, {"4", "a", "b", "y"}};
    auto s = split(c, 0.5, 1);
    EXPECT_FALSE(s.stratified);
    EXPECT_EQ(s.train.size() + s.test.size(), 4u);
}

TEST(Synth, StylesHaveTheirSignatures) {
    auto corpus = synth_corpus({default_styles(), 30, 3, std::nullopt});
    ASSERT_EQ(corpus.size(), 90u);
    EXPECT_EQ(style_labels(corpus), (std::vector<std::string>{"cochrane", "elife", "plos"}));
    std::set<std::string> ids;
    for (const auto& s : corpus) {
        ids.insert(s.id);
        const auto ne = count_words(s.expert), nl = count_words(s.lay);
        if (s.style == "cochrane") { EXPECT_LT(nl, ne) << s.lay; }
        if (s.style == "elife") { EXPECT_GT(nl, ne) << s.lay; }
        if (s.style == "plos") {
            for (const auto& t : synth::kOrgans) EXPECT_EQ(s.lay.find(t.jargon), std::string::npos);
        }
    }
    EXPECT_EQ(ids.size(), corpus.size());
}

TEST(Synth, DeterministicUnderSeed) {
    SynthSpec spec{default_styles(), 10, 9, std::nullopt};
    EXPECT_EQ(synth_corpus(spec), synth_corpus(spec));
    spec.seed = 10;
    EXPECT_NE(synth_corpus(spec), synth_corpus({default_styles(), 10, 9, std::nullopt}));
    spec.samples_per_style = 0;
    EXPECT_TRUE(synth_corpus(spec).empty());
}

TEST(Synth, PlantedSignalIsUnitDirection) {
    auto p = make_planted_signal({2, 3.0}, 16, 4);
    double n = 0.0;
    for (double v : p.direction) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
    EXPECT_EQ(p.layer, 2u);
    EXPECT_EQ(p.separator, Tokenizer::kSep);
}

TEST(Encode, MapsStylesToBranches) {
    auto corpus = synth_corpus({default_styles(), 2, 1, std::nullopt});
    auto tok = build_vocab(corpus);
    auto enc = encode_corpus(corpus, tok, style_labels(corpus));
    ASSERT_EQ(enc.size(), 6u);
    EXPECT_EQ(enc[0].style, 0u);
    EXPECT_EQ(enc[1].style, 1u);
    EXPECT_THROW(encode_corpus(corpus, tok, {"cochrane"}), IngestionError);
}
