// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "magical/adapter.hpp"
#include "magical/grad_check.hpp"

using namespace magical;

namespace {

// y_j = Σ_p W0[j,p] x_p + Σ_q B[j,q] Σ_p A[q,p] x_p, computed entry by entry.
std::vector<double> lora_oracle(const std::vector<double>& x, const Tensor& w0, const Tensor& a, const Tensor& b,
                                double alpha = 1.0) {
    const std::size_t d = w0.dim(0), k = w0.dim(1), r = a.dim(0);
    std::vector<double> ax(r, 0.0), y(d, 0.0);
    for (std::size_t q = 0; q < r; ++q)
        for (std::size_t p = 0; p < k; ++p) ax[q] += a.at(q, p) * x[p];
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t p = 0; p < k; ++p) y[j] += w0.at(j, p) * x[p];
        for (std::size_t q = 0; q < r; ++q) y[j] += alpha * b.at(j, q) * ax[q];
    }
    return y;
}

ModelConfig small_cfg() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 12;
    c.vocab_size = 13;
    c.max_seq = 12;
    c.seed = 1;
    return c;
}

void randomize_branches(AdaptedModel& m, Rng& rng, double std = 0.3) {
    for (auto& p : m.trainable_parameters())
        for (auto& v : p.tensor.data()) v = rng.normal(std);
}

}  // namespace

TEST(Lora, MatchesEntrywiseOracle) {
    Rng rng(2);
    auto w0 = rng.gaussian({5, 7}, 1.0);
    auto pair = LoraPair::create(5, 7, 2, rng);
    for (auto& v : pair.B.data()) v = rng.normal();
    auto x = rng.gaussian({7}, 1.0);
    auto y = lora_forward(x, w0, pair);
    auto ref = lora_oracle(x.values(), w0, pair.A, pair.B);
    ASSERT_EQ(y.shape(), (Shape{5}));
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(y[j], ref[j], 1e-12);
}

TEST(Lora, Contracts) {
    Rng rng(3);
    EXPECT_THROW(LoraPair::create(4, 4, 4, rng), ConfigurationError);
    EXPECT_THROW(LoraPair::create(4, 6, 0, rng), ConfigurationError);
    auto pair = LoraPair::create(4, 6, 2, rng);
    auto w0 = rng.gaussian({4, 6}, 1.0);
    EXPECT_THROW(lora_forward(rng.gaussian({5}, 1.0), w0, pair), DimensionError);
    w0.set_requires_grad(true);
    EXPECT_THROW(lora_forward(rng.gaussian({6}, 1.0), w0, pair), ContractError);
}

TEST(Asymmetric, SwitchReducesToSingleLora) {
    Rng rng(4);
    auto w0 = rng.gaussian({6, 5}, 1.0);
    auto ad = AsymmetricAdapter::create(6, 5, 2, 3, rng);
    for (auto& b : ad.branches())
        for (auto& v : b.data()) v = rng.normal();
    auto x = rng.gaussian({4, 5}, 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
        ad.control() = BranchControl::switch_to(i, 3);
        auto y = magical_forward(x, w0, ad);
        LoraPair p{ad.shared_projection(), ad.branches()[i], 2};
        auto ref = lora_forward(x, w0, p);
        for (std::size_t e = 0; e < y.size(); ++e) EXPECT_NEAR(y[e], ref[e], 1e-12);
    }
}

TEST(Asymmetric, RouterMixesBranchesLinearly) {
    Rng rng(5);
    auto w0 = rng.gaussian({6, 5}, 1.0);
    auto ad = AsymmetricAdapter::create(6, 5, 2, 3, rng);
    for (auto& b : ad.branches())
        for (auto& v : b.data()) v = rng.normal();
    const std::vector<double> alpha{0.2, 0.5, 0.3};
    auto x = rng.gaussian({5}, 1.0);
    ad.control() = BranchControl::router(alpha);
    auto y = magical_forward(x, w0, ad);
    auto y2 = magical_forward(x, w0, ad, Tensor::vector(alpha));
    std::vector<double> ref(6, 0.0);
    for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t p = 0; p < 5; ++p) ref[j] += w0.at(j, p) * x[p];
    for (std::size_t i = 0; i < 3; ++i) {
        auto zero = Tensor::zeros({6, 5});
        auto part = lora_oracle(x.values(), zero, ad.shared_projection(), ad.branches()[i], alpha[i]);
        for (std::size_t j = 0; j < 6; ++j) ref[j] += part[j];
    }
    for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_NEAR(y[j], ref[j], 1e-12);
        EXPECT_NEAR(y2[j], ref[j], 1e-12);
    }
    EXPECT_THROW(BranchControl::router({0.5, 0.6, -0.1}), ControlError);
    EXPECT_THROW(magical_forward(x, w0, ad, Tensor::vector({0.5, 0.4, 0.2})), ControlError);
}

TEST(Asymmetric, OffControlReturnsBase) {
    Rng rng(6);
    auto w0 = rng.gaussian({6, 5}, 1.0);
    auto ad = AsymmetricAdapter::create(6, 5, 2, 2, rng);
    for (auto& v : ad.branches()[0].data()) v = 1.0;
    ad.control() = BranchControl::off(2);
    auto x = rng.gaussian({5}, 1.0);
    auto y = magical_forward(x, w0, ad);
    auto base = matmul_nt(reshape(x, {1, 5}), w0);
    EXPECT_EQ(y.values(), base.values());
}

TEST(Asymmetric, SwitchIndexOutOfRange) {
    EXPECT_THROW(switch_alpha(3, 3), RoutingError);
}

TEST(ParamCount, FormulasAndReduction) {
    EXPECT_EQ(param_count(10, 10, 2, 3, 1, Scheme::Lora), 40u);
    EXPECT_EQ(param_count(10, 10, 2, 3, 1, Scheme::MultiLora), 120u);
    EXPECT_EQ(param_count(10, 10, 2, 3, 1, Scheme::Magical), 80u);
    const double reduction = 1.0 - static_cast<double>(param_count(64, 64, 8, 3, 4, Scheme::Magical)) /
                                       static_cast<double>(param_count(64, 64, 8, 3, 4, Scheme::MultiLora));
    EXPECT_NEAR(reduction * 100.0, 33.33, 0.005);
}

TEST(AdaptedModel, TrainableCountMatchesFormula) {
    auto base = std::make_shared<Transformer>(small_cfg());
    for (auto scheme : {Scheme::Magical, Scheme::MultiLora}) {
        AttachSpec spec;
        spec.rank = 2;
        spec.branches = 3;
        spec.scheme = scheme;
        AdaptedModel m(base, spec);
        const auto cfg = small_cfg();
        std::size_t expect = 0;
        for (auto s : spec.sites) {
            auto [d, k] = site_shape(cfg, s);
            expect += param_count(d, k, 2, 3, 1, scheme) * cfg.n_layers;
        }
        EXPECT_EQ(m.trainable_count(), expect) << scheme_name(scheme);
    }
}

TEST(AdaptedModel, AttachValidation) {
    auto base = std::make_shared<Transformer>(small_cfg());
    AttachSpec spec;
    spec.rank = 2;
    spec.layers = {3};
    EXPECT_THROW(AdaptedModel(base, spec), ConfigurationError);
    spec.layers = {};
    spec.sites = {};
    EXPECT_THROW(AdaptedModel(base, spec), ConfigurationError);
    spec.sites = {SiteKind::Query};
    spec.scheme = Scheme::Lora;
    EXPECT_THROW(AdaptedModel(base, spec), ConfigurationError);
    spec.branches = 1;
    EXPECT_NO_THROW(AdaptedModel(base, spec));
    EXPECT_THROW(parse_site("gate"), ConfigurationError);
    EXPECT_THROW(parse_scheme("dora"), ConfigurationError);
}

TEST(AdaptedModel, FreshAttachPreservesBase) {
    auto base = std::make_shared<Transformer>(small_cfg());
    AttachSpec spec;
    spec.rank = 2;
    AdaptedModel m(base, spec);
    const std::vector<TokenId> toks{1, 5, 9, 2, 4};
    auto ref = base->forward(toks).logits;
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_EQ(m.forward(toks, BranchControl::switch_to(i, 3)).logits.values(), ref.values());
}

TEST(AdaptedModel, BranchIsolation) {
    auto base = std::make_shared<Transformer>(small_cfg());
    AttachSpec spec;
    spec.rank = 2;
    AdaptedModel m(base, spec);
    Rng rng(8);
    randomize_branches(m, rng);
    const std::vector<TokenId> toks{1, 5, 9, 2, 4, 7};
    GradientTape tape;
    auto loss = lm_loss(m.forward(toks, BranchControl::switch_to(1, 3)).logits, shifted_targets(toks, 1));
    auto g = tape.backward(loss);
    for (const auto& p : m.trainable_parameters()) {
        const bool other_branch = p.name.ends_with(".B0") || p.name.ends_with(".B2");
        const auto grad = g.get(p.tensor);
        double mx = 0.0;
        for (double v : grad.data()) mx = std::max(mx, std::abs(v));
        if (other_branch) {
            EXPECT_EQ(mx, 0.0) << p.name;
        } else {
            EXPECT_GT(mx, 0.0) << p.name;
        }
    }
}

TEST(AdaptedModel, RouterGradientsMatchFiniteDifferences) {
    auto base = std::make_shared<Transformer>(small_cfg());
    for (auto scope : {RouterScope::Global, RouterScope::PerSite}) {
        AttachSpec spec;
        spec.rank = 2;
        spec.mode = ControlMode::Router;
        spec.router_scope = scope;
        spec.sites = {SiteKind::Query, SiteKind::FeedDown};
        AdaptedModel m(base, spec);
        Rng rng(9);
        randomize_branches(m, rng, 1.0);
        const std::vector<TokenId> toks{1, 5, 9, 2, 4};
        auto fn = [&] {
            auto alphas = m.router_alphas(std::span<const TokenId>(toks).first(3));
            return lm_loss(m.forward(toks, alphas).logits, shifted_targets(toks, 3));
        };
        auto report = grad_check(fn, m.trainable_parameters());
        EXPECT_TRUE(report.pass) << report.worst()->name << " " << report.worst()->max_rel_error;
    }
}

TEST(AdaptedModel, MultiLoraSwitchUsesOwnPair) {
    auto base = std::make_shared<Transformer>(small_cfg());
    AttachSpec spec;
    spec.rank = 2;
    spec.scheme = Scheme::MultiLora;
    AdaptedModel m(base, spec);
    Rng rng(10);
    randomize_branches(m, rng);
    EXPECT_NE(m.projection(1, 0).values(), m.projection(1, 1).values());
    const std::vector<TokenId> toks{1, 5, 9};
    auto a = m.forward(toks, BranchControl::switch_to(0, 3)).logits;
    auto b = m.forward(toks, BranchControl::switch_to(1, 3)).logits;
    EXPECT_NE(a.values(), b.values());
}

TEST(AdaptedModel, GenerationRespectsControl) {
    auto base = std::make_shared<Transformer>(small_cfg());
    AttachSpec spec;
    spec.rank = 2;
    AdaptedModel m(base, spec);
    const std::vector<TokenId> prompt{1, 5, 9};
    auto plain = generate_greedy(*base, prompt, 4);
    EXPECT_EQ(m.generate(prompt, 4, std::nullopt, BranchControl::switch_to(2, 3)), plain);
}
