// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "magical/grad_check.hpp"
#include "magical/random.hpp"
#include "magical/tensor.hpp"

using namespace magical;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto c = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
            c.data()[i * n + j] = s;
        }
    return c;
}

Tensor leaf(Rng& rng, Shape s, double std = 1.0) {
    auto t = rng.gaussian(std::move(s), std);
    t.set_requires_grad(true);
    return t;
}

void expect_grads_ok(const std::function<Tensor()>& f, std::vector<NamedTensor> params, double tol = 1e-6) {
    auto report = grad_check(f, std::move(params), 1e-5, tol);
    ASSERT_TRUE(report.pass) << report.worst()->name << " rel err " << report.worst()->max_rel_error;
}

}  // namespace

TEST(Tensor, MatmulMatchesTripleLoop) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.index(7), k = 1 + rng.index(9), n = 1 + rng.index(6);
        auto a = rng.gaussian({m, k}, 1.0), b = rng.gaussian({k, n}, 1.0);
        auto c = matmul(a, b), ref = naive_matmul(a, b);
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
        auto nt = matmul_nt(a, transpose(b));
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(nt[i], ref[i], 1e-12);
    }
}

TEST(Tensor, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
    EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
    EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4}), DimensionError);
}

TEST(Tensor, BackwardRequiresScalar) {
    GradientTape tape;
    auto x = Tensor::vector({1.0, 2.0}).set_requires_grad(true);
    auto y = scale(x, 2.0);
    EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Tensor, SharedSubexpressionAccumulates) {
    GradientTape tape;
    auto x = Tensor::vector({3.0}).set_requires_grad(true);
    auto y = mul(x, x);          // x²
    auto z = sum(add(y, x));     // x² + x
    auto g = tape.backward(z);
    EXPECT_DOUBLE_EQ(g.get(x)[0], 7.0);
}

TEST(Tensor, UnusedLeafHasZeroGradient) {
    GradientTape tape;
    auto x = Tensor::vector({1.0, 2.0}).set_requires_grad(true);
    auto unused = Tensor::vector({5.0}).set_requires_grad(true);
    auto g = tape.backward(sum(x));
    EXPECT_FALSE(g.contains(unused));
    EXPECT_EQ(g.get(unused)[0], 0.0);
}

TEST(Tensor, NoGradGuardSuppressesRecording) {
    GradientTape tape;
    auto x = Tensor::vector({1.0}).set_requires_grad(true);
    {
        NoGradGuard guard;
        (void)sum(scale(x, 3.0));
    }
    EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, ElementwiseGradients) {
    Rng rng(7);
    auto x = leaf(rng, {3, 4});
    auto y = leaf(rng, {3, 4});
    auto pos = Tensor::filled({3, 4}, 0.0);
    for (std::size_t i = 0; i < 12; ++i) pos.data()[i] = 0.5 + rng.uniform();
    pos.set_requires_grad(true);
    expect_grads_ok([&] { return sum(mul(add(x, y), sub(x, scale(y, 0.3)))); }, {{"x", x}, {"y", y}});
    expect_grads_ok([&] { return sum(exp(scale(x, 0.5))); }, {{"x", x}});
    expect_grads_ok([&] { return sum(log(pos)); }, {{"pos", pos}});
    expect_grads_ok([&] { return sum(mul(sigmoid(x), tanh(y))); }, {{"x", x}, {"y", y}});
    expect_grads_ok([&] { return sum(gelu(x)); }, {{"x", x}});
}

TEST(Tensor, LinearAlgebraGradients) {
    Rng rng(8);
    auto a = leaf(rng, {3, 5}), b = leaf(rng, {5, 2}), c = leaf(rng, {4, 5}), r = leaf(rng, {2});
    expect_grads_ok([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {{"a", a}, {"b", b}});
    expect_grads_ok([&] { return sum(tanh(matmul_nt(a, c))); }, {{"a", a}, {"c", c}});
    expect_grads_ok([&] { return sum(tanh(add_rowwise(matmul(a, b), r))); }, {{"a", a}, {"b", b}, {"r", r}});
    expect_grads_ok([&] { return sum(tanh(transpose(a))); }, {{"a", a}});
    expect_grads_ok([&] { return dot(reshape(a, {15}), reshape(a, {15})); }, {{"a", a}});
    expect_grads_ok([&] { return sum(tanh(mean_rows(a, 1, 3))); }, {{"a", a}});
    auto s = Tensor::scalar(0.7).set_requires_grad(true);
    expect_grads_ok([&] { return sum(tanh(scale(a, s))); }, {{"a", a}, {"s", s}});
}

TEST(Tensor, SoftmaxAndLogsumexp) {
    Rng rng(9);
    auto x = leaf(rng, {3, 4});
    auto sm = softmax(x);
    for (std::size_t i = 0; i < 3; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 4; ++j) z += std::exp(x.at(i, j));
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(sm.at(i, j), std::exp(x.at(i, j)) / z, 1e-14);
    }
    auto w = rng.gaussian({3, 4}, 1.0);
    expect_grads_ok([&] { return sum(mul(softmax(x), w)); }, {{"x", x}});
    expect_grads_ok([&] { return logsumexp(reshape(x, {12})); }, {{"x", x}});
    auto sq = leaf(rng, {4, 4});
    auto w4 = rng.gaussian({4, 4}, 1.0);
    expect_grads_ok([&] { return sum(mul(causal_softmax(sq), w4)); }, {{"sq", sq}}, 1e-5);
    auto cs = causal_softmax(sq);
    EXPECT_EQ(cs.at(0, 1), 0.0);
    EXPECT_NEAR(cs.at(0, 0), 1.0, 1e-15);
}

TEST(Tensor, LayerNormMatchesDefinition) {
    Rng rng(10);
    auto x = leaf(rng, {3, 6});
    auto g = leaf(rng, {6}), b = leaf(rng, {6});
    auto y = layer_norm(x, g, b);
    for (std::size_t i = 0; i < 3; ++i) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 6; ++j) mu += x.at(i, j) / 6.0;
        for (std::size_t j = 0; j < 6; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu) / 6.0;
        for (std::size_t j = 0; j < 6; ++j)
            EXPECT_NEAR(y.at(i, j), (x.at(i, j) - mu) / std::sqrt(var + 1e-5) * g[j] + b[j], 1e-12);
    }
    auto w = rng.gaussian({3, 6}, 1.0);
    expect_grads_ok([&] { return sum(mul(layer_norm(x, g, b), w)); }, {{"x", x}, {"g", g}, {"b", b}}, 1e-5);
}

TEST(Tensor, IndexingOpsGradients) {
    Rng rng(11);
    auto table = leaf(rng, {5, 3});
    const std::size_t ids[] = {4, 1, 4, 0};
    expect_grads_ok([&] { return sum(tanh(embedding(table, ids))); }, {{"table", table}});
    auto x = leaf(rng, {4, 6});
    expect_grads_ok([&] { return sum(tanh(slice_rows(x, 1, 2))); }, {{"x", x}});
    expect_grads_ok([&] { return sum(tanh(slice_cols(x, 2, 3))); }, {{"x", x}});
    auto y = leaf(rng, {4, 2});
    expect_grads_ok([&] { return sum(tanh(concat({x, y}, 1))); }, {{"x", x}, {"y", y}});
    expect_grads_ok([&] { return sum(tanh(concat({x, x}, 0))); }, {{"x", x}});
    EXPECT_THROW(embedding(table, std::vector<std::size_t>{5}), DimensionError);
}

TEST(Tensor, CrossEntropyMatchesDefinition) {
    Rng rng(12);
    auto logits = leaf(rng, {3, 5});
    const std::ptrdiff_t targets[] = {2, kIgnoreTarget, 4};
    double ref = 0.0;
    for (std::size_t i : {0u, 2u}) {
        double z = 0.0;
        for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits.at(i, j));
        ref += std::log(z) - logits.at(i, static_cast<std::size_t>(targets[i]));
    }
    EXPECT_NEAR(cross_entropy(logits, targets).item(), ref / 2.0, 1e-12);
    expect_grads_ok([&] { return cross_entropy(logits, targets); }, {{"logits", logits}});
}

TEST(Tensor, CosineSimilarity) {
    auto a = Tensor::vector({1.0, 0.0}), b = Tensor::vector({1.0, 1.0});
    EXPECT_NEAR(cosine_similarity(a, b).item(), 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_THROW(cosine_similarity(a, Tensor::zeros({2})), DegenerateVectorError);
    Rng rng(13);
    auto u = leaf(rng, {5}), v = leaf(rng, {5});
    expect_grads_ok([&] { return cosine_similarity(u, v); }, {{"u", u}, {"v", v}});
}

TEST(GradCheck, DetectsWrongDerivative) {
    auto x = Tensor::vector({0.3, -0.7, 1.1}).set_requires_grad(true);
    // Correct value, derivative off by a factor of two.
    auto bad = [&] {
        return sum(map_elementwise(x, [](double v) { return v * v; }, [](double v) { return 4.0 * v; }));
    };
    auto report = grad_check(bad, {{"x", x}});
    EXPECT_FALSE(report.pass);
    EXPECT_GT(report.worst()->max_rel_error, 0.1);
}

TEST(GradCheck, NonFiniteRaises) {
    auto x = Tensor::vector({-1.0}).set_requires_grad(true);
    EXPECT_THROW(grad_check([&] { return sum(map_elementwise(x, [](double v) { return std::sqrt(v); },
                                                             [](double) { return 0.0; })); },
                            {{"x", x}}),
                 NumericalDomainError);
}
