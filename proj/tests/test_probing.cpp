// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "magical/probing.hpp"

using namespace magical;

namespace {

struct Fixture {
    std::shared_ptr<Transformer> model;
    std::vector<EncodedSample> data;
};

Fixture planted_fixture(std::uint64_t seed, std::size_t samples_per_style, std::optional<std::size_t> layer) {
    SynthSpec spec{default_styles(), samples_per_style, seed, std::nullopt};
    if (layer) spec.planted = PlantedSpec{*layer, 4.0};
    auto corpus = synth_corpus(spec);
    auto tok = build_vocab(corpus);
    ModelConfig cfg;
    cfg.n_layers = 4;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = tok.size();
    cfg.max_seq = 48;
    cfg.seed = seed;
    auto model = std::make_shared<Transformer>(cfg);
    if (spec.planted) model->set_planted_signal(make_planted_signal(*spec.planted, cfg.d_model, seed));
    return {model, encode_corpus(corpus, tok, style_labels(corpus))};
}

}  // namespace

TEST(ProbeDataset, CountsAndLabels) {
    auto pairs = build_probe_dataset(2, 1, 0);
    ASSERT_EQ(pairs.size(), 4u);
    std::size_t pos = 0;
    for (const auto& p : pairs) {
        EXPECT_EQ(p.label == 1, p.expert_index == p.lay_index);
        pos += p.label;
    }
    EXPECT_EQ(pos, 2u);
    auto many = build_probe_dataset(50, 3, 7);
    EXPECT_EQ(many.size(), 200u);
    for (std::size_t i = 0; i < 50; ++i) {
        std::set<std::size_t> negs;
        for (const auto& p : many)
            if (p.expert_index == i && p.label == 0) negs.insert(p.lay_index);
        EXPECT_EQ(negs.size(), 3u);
        EXPECT_FALSE(negs.count(i));
    }
    auto again = build_probe_dataset(50, 3, 7);
    for (std::size_t k = 0; k < many.size(); ++k) EXPECT_EQ(many[k].lay_index, again[k].lay_index);
    EXPECT_THROW(build_probe_dataset(3, 3, 0), SamplingError);
    EXPECT_THROW(build_probe_dataset(1, 0, 0), SamplingError);
}

TEST(PairTokens, SymmetricTruncation) {
    std::vector<TokenId> e(10, 5), l(10, 6);
    auto fits = pair_tokens(e, l, 21);
    EXPECT_FALSE(fits.truncated);
    EXPECT_EQ(fits.tokens.size(), 21u);
    auto cut = pair_tokens(e, l, 11);
    EXPECT_TRUE(cut.truncated);
    EXPECT_EQ(cut.tokens.size(), 11u);
    EXPECT_EQ(std::count(cut.tokens.begin(), cut.tokens.end(), 5), 5);
    EXPECT_EQ(std::count(cut.tokens.begin(), cut.tokens.end(), 6), 5);
    std::vector<TokenId> shortl(2, 6);
    auto lop = pair_tokens(e, shortl, 9);
    EXPECT_EQ(std::count(lop.tokens.begin(), lop.tokens.end(), 6), 2);
    EXPECT_EQ(std::count(lop.tokens.begin(), lop.tokens.end(), 5), 6);
}

TEST(LayerFeature, PoolingAndLayerZero) {
    auto fx = planted_fixture(1, 2, std::nullopt);
    const ProbePair p{0, 1, 0};
    const auto toks = pair_tokens(fx.data[0].expert, fx.data[1].lay, 48).tokens;
    // Layer 0 is the mean of token + position embeddings.
    auto f0 = layer_feature(*fx.model, fx.data, p, 0);
    const std::size_t d = 16;
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < toks.size(); ++t)
            s += fx.model->token_embedding().at(toks[t], j) + fx.model->position_embedding().at(t, j);
        EXPECT_NEAR(f0[j], s / static_cast<double>(toks.size()), 1e-12);
    }
    auto acts = fx.model->forward(toks).acts.layers[3];
    auto f3 = layer_feature(*fx.model, fx.data, p, 3);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < toks.size(); ++t) s += acts.at(t, j);
        EXPECT_NEAR(f3[j], s / static_cast<double>(toks.size()), 1e-12);
    }
    EXPECT_EQ(f3, layer_feature(*fx.model, fx.data, p, 3));
    EXPECT_THROW(layer_feature(*fx.model, fx.data, p, 5), ConfigurationError);
}

TEST(FitProbe, SeparableDataIsPerfect) {
    Rng rng(3);
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (int i = 0; i < 100; ++i) {
        const int label = i % 2;
        x.push_back({(label ? 1.0 : -1.0) + rng.uniform(-0.5, 0.5), rng.normal()});
        y.push_back(label);
    }
    auto fit = fit_probe(x, y, 0);
    EXPECT_EQ(fit.validation_accuracy, 1.0);
    for (std::size_t s = 1; s < fit.loss_history.size(); ++s)
        EXPECT_LE(fit.loss_history[s], fit.loss_history[s - 1] + 1e-9);
}

TEST(FitProbe, IndependentLabelsNearChance) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        std::vector<std::vector<double>> x;
        std::vector<int> y;
        for (int i = 0; i < 200; ++i) {
            x.push_back({rng.normal(), rng.normal(), rng.normal()});
            y.push_back(rng.uniform() < 0.5);
        }
        const double acc = fit_probe(x, y, seed).validation_accuracy;
        EXPECT_GE(acc, 0.35) << seed;
        EXPECT_LE(acc, 0.65) << seed;
    }
}

TEST(FitProbe, ZeroLogitIsClassZero) {
    ProbeFit fit;
    fit.weights = {0.0};
    fit.feature_mean = {0.0};
    fit.feature_scale = {1.0};
    EXPECT_EQ(fit.probability(std::vector<double>{3.0}), 0.5);
    EXPECT_EQ(fit.predict(std::vector<double>{3.0}), 0);
}

TEST(FitProbe, DegenerateSplits) {
    std::vector<std::vector<double>> x(10, {1.0});
    EXPECT_THROW(fit_probe(x, std::vector<int>(10, 1), 0), DegenerateSplitError);
    EXPECT_THROW(fit_probe({{1.0}, {2.0}}, {0, 1}, 0), DegenerateSplitError);
}

TEST(SelectLayers, TopKWithTies) {
    EXPECT_EQ(select_semantic_layers({{1, 0.5}, {2, 0.9}, {3, 0.7}}, 1), (std::vector<std::size_t>{2}));
    EXPECT_EQ(select_semantic_layers({{1, 0.5}, {2, 0.9}, {3, 0.7}}, 3), (std::vector<std::size_t>{1, 2, 3}));
    EXPECT_EQ(select_semantic_layers({{3, 0.8}, {1, 0.8}, {2, 0.1}}, 1), (std::vector<std::size_t>{1}));
    EXPECT_EQ(select_semantic_layers({{2, 0.9}, {3, 0.7}, {1, 0.5}}, 2),
              select_semantic_layers({{1, 0.5}, {3, 0.7}, {2, 0.9}}, 2));
    EXPECT_THROW(select_semantic_layers({{1, 0.5}}, 2), ConfigurationError);
}

TEST(ProbeReport, TsvRoundTrip) {
    ProbeReport r;
    r.layers = {{1, 0.5}, {2, 0.875}};
    r.selected = {2};
    const auto tsv = r.to_tsv();
    EXPECT_EQ(tsv, "layer\taccuracy\tselected\n1\t0.500000\t0\n2\t0.875000\t1\n");
    auto back = ProbeReport::from_tsv(tsv);
    EXPECT_EQ(back.selected, r.selected);
    EXPECT_EQ(back.layers[1].accuracy, 0.875);
}

TEST(ProbeLayers, FindsPlantedLayer) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const std::size_t layer = 1 + seed % 4;
        auto fx = planted_fixture(seed, 60, layer);
        ProbeConfig cfg;
        auto report = probe_layers(*fx.model, fx.data, cfg, seed);
        EXPECT_TRUE(report.is_selected(layer)) << "seed " << seed << "\n" << report.to_tsv();
        EXPECT_EQ(report.selected.size(), 2u);
    }
}

TEST(ProbeLayers, NegativeSamplingStability) {
    auto fx = planted_fixture(4, 170, 2);
    ProbeConfig cfg;
    auto a = probe_layers(*fx.model, fx.data, cfg, 1);
    auto b = probe_layers(*fx.model, fx.data, cfg, 2);
    ASSERT_GE(a.pairs, 1000u);
    for (std::size_t i = 0; i < a.layers.size(); ++i)
        EXPECT_LT(std::abs(a.layers[i].accuracy - b.layers[i].accuracy), 0.1) << a.to_tsv() << b.to_tsv();
}
