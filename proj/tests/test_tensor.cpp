#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "ew/gradcheck.hpp"
#include "ew/tensor.hpp"

using namespace ew;

namespace {

Tensor rand_leaf(Shape s, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(s), rng, scale, true);
}

constexpr double kOpTol = 1e-6;

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
    auto I = Tensor::from({2, 2}, {1, 0, 0, 1});
    auto y = matmul(I, I);
    EXPECT_EQ(y.values(), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Matmul, HandArithmetic) {
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from({2, 1}, {1, 1});
    auto y = matmul(a, b);
    EXPECT_EQ(y.shape(), (Shape{2, 1}));
    EXPECT_EQ(y.values(), (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        const auto first = msg.find("[2x3]");
        ASSERT_NE(first, std::string::npos);
        EXPECT_NE(msg.rfind("[2x3]"), first);
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    auto a = rand_leaf({5, 4}, 1), b = rand_leaf({4, 3}, 2);
    auto r = check_gradients([&] { return project_to_scalar(matmul(a, b)); }, {a, b});
    EXPECT_LT(r.rel_error, kOpTol);
}

TEST(Matmul, TransposedRightOperand) {
    auto a = rand_leaf({3, 4}, 3), b = rand_leaf({5, 4}, 4);
    const auto y = matmul_nt(a, b), ref = matmul(a, transpose(b));
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
    auto r = check_gradients([&] { return project_to_scalar(matmul_nt(a, b)); }, {a, b});
    EXPECT_LT(r.rel_error, kOpTol);
}

TEST(Softmax, UniformInput) {
    auto y = softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
    auto y = softmax(Tensor::from({2}, {1000, 0}), 0);
    EXPECT_TRUE(std::isfinite(y[0]) && std::isfinite(y[1]));
    EXPECT_NEAR(y[0], 1.0, 1e-15);
    EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(Softmax, RowsSumToOneOnEitherAxis) {
    auto x = rand_leaf({3, 4}, 3, 3.0);
    for (std::size_t axis : {0u, 1u}) {
        auto y = softmax(x, axis);
        const std::size_t outer = axis == 0 ? 4 : 3, n = axis == 0 ? 3 : 4;
        for (std::size_t o = 0; o < outer; ++o) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += axis == 0 ? y[k * 4 + o] : y[o * 4 + k];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
    auto x = rand_leaf({3, 4}, 4);
    for (std::size_t axis : {0u, 1u}) {
        auto r = check_gradients([&] { return project_to_scalar(softmax(x, axis)); }, {x});
        EXPECT_LT(r.rel_error, kOpTol) << "axis " << axis;
    }
}

TEST(Softmax, BadAxisRejected) { EXPECT_THROW(softmax(Tensor::zeros({2, 2}), 2), DimensionError); }

TEST(CausalSoftmax, HiddenEntriesExactlyZero) {
    Rng rng(5);
    const auto x = Tensor::randn({3, 5}, rng);
    const auto y = causal_softmax(x, 0.5, 2);  // row i sees columns <= 2 + i
    for (std::size_t i = 0; i < 3; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            if (j > 2 + i) EXPECT_EQ(y[i * 5 + j], 0.0);
            s += y[i * 5 + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-14);
    }
    // The last row sees every column: plain softmax of the scaled logits.
    const auto full = softmax(scale(rows(x, 2, 1), 0.5), 1);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(y[10 + j], full[j], 1e-15);
}

TEST(CausalSoftmax, GradientMatchesFiniteDifferences) {
    auto x = rand_leaf({4, 7}, 6);
    auto r = check_gradients([&] { return project_to_scalar(causal_softmax(x, 0.7, 3)); }, {x});
    EXPECT_LT(r.rel_error, kOpTol);
}

TEST(Detach, GradientWall) {
    auto x = Tensor::from({3}, {1.5, -2.0, 0.25}, true);
    auto w = Tensor::from({3}, {0.3, 0.7, -1.1}, true);
    auto y = detach(x);
    backward(sum(mul(y, w)));
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(w.grad(), x.values());
    EXPECT_TRUE(y.detached());
    EXPECT_FALSE(y.requires_grad());
}

TEST(Detach, Idempotent) {
    auto x = rand_leaf({4}, 5);
    EXPECT_EQ(detach(detach(x)).values(), x.values());
}

TEST(Detach, WallHoldsAcrossDeepGraph) {
    // x reaches the loss both directly (through a detach) and via w; only w may see gradient.
    auto x = rand_leaf({2, 2}, 6), w = rand_leaf({2, 2}, 7);
    auto h = matmul(detach(silu(x)), w);
    auto loss = sum(mul(softmax(h, 1), add(detach(x), w)));
    backward(loss);
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
    EXPECT_GT(w.grad_norm(), 0.0);
}

TEST(Cosine, IdenticalAndOrthogonal) {
    auto a = Tensor::from({3}, {1, 2, 3});
    EXPECT_NEAR(cosine_similarity(a, a).item(), 1.0, 1e-15);
    EXPECT_EQ(cosine_similarity(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1})).item(), 0.0);
}

TEST(Cosine, DegenerateNormRejected) {
    EXPECT_THROW(cosine_similarity(Tensor::zeros({3}), Tensor::from({3}, {1, 2, 3})), DegenerateNormError);
    EXPECT_THROW(cosine_similarity(Tensor::from({3}, {1, 2, 3}), Tensor::full({3}, 1e-14)), DegenerateNormError);
}

TEST(Cosine, GradientMatchesFiniteDifferences) {
    auto a = rand_leaf({16}, 8), b = rand_leaf({16}, 9);
    auto r = check_gradients([&] { return cosine_similarity(a, b); }, {a, b});
    EXPECT_LT(r.rel_error, kOpTol);
}

TEST(Ops, ElementwiseAndReductionGradients) {
    auto a = rand_leaf({3, 5}, 10), b = rand_leaf({3, 5}, 11);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(add(a, b)); }, {a, b}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(sub(a, b)); }, {a, b}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(mul(a, b)); }, {a, b}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(scale(a, -2.5)); }, {a}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return mul(sum(a), mean(b)); }, {a, b}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(silu(a)); }, {a}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(mean_axis(a, 1)); }, {a}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(transpose(a)); }, {a}).rel_error, kOpTol);
}

TEST(Ops, LayerNormGradient) {
    auto x = rand_leaf({4, 6}, 12, 2.0), g = rand_leaf({6}, 13), b = rand_leaf({6}, 14);
    auto r = check_gradients([&] { return project_to_scalar(layer_norm(x, g, b)); }, {x, g, b});
    EXPECT_LT(r.rel_error, kOpTol);
}

TEST(Ops, ConcatAndSliceGradients) {
    auto a = rand_leaf({2, 3}, 15), b = rand_leaf({4, 3}, 16), c = rand_leaf({2, 5}, 17);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(concat_rows({a, b, a})); }, {a, b}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(concat_cols({a, c})); }, {a, c}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(rows(b, 1, 2)); }, {b}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(columns(c, 1, 3)); }, {c}).rel_error, kOpTol);
    EXPECT_LT(check_gradients([&] { return project_to_scalar(add_bias(b, rand_leaf({3}, 18))); }, {b}).rel_error,
              kOpTol);
    EXPECT_THROW(concat_rows({a, c}), DimensionError);
}

TEST(Ops, ConvolutionGradients) {
    for (std::size_t k : {1u, 3u}) {
        auto x = rand_leaf({3, 5, 4, 2}, 19), w = rand_leaf({2, 3, k, k}, 20), b = rand_leaf({2}, 21);
        auto r = check_gradients([&] { return project_to_scalar(conv2d(x, w, b)); }, {x, w, b});
        EXPECT_LT(r.rel_error, kOpTol) << "kernel " << k;
    }
}

TEST(Ops, ConvolutionMatchesDirectSum) {
    // 3x3 "same" conv of a single-channel ramp with an all-ones kernel sums each 3x3 neighbourhood.
    std::vector<double> v(16);
    for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
    auto x = Tensor::from({1, 4, 4, 1}, v);
    auto y = conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}));
    EXPECT_EQ(y[0], 0 + 1 + 4 + 5);
    EXPECT_EQ(y[5], 0 + 1 + 2 + 4 + 5 + 6 + 8 + 9 + 10);
}

TEST(Tape, VisitsEachNodeOnceInReverseTopologicalOrder) {
    auto a = rand_leaf({3}, 22), b = rand_leaf({3}, 23);
    auto c = mul(a, b);
    auto d = add(c, a);  // a reused
    auto e = sum(mul(d, c));
    auto tape = GradTape::record(e);
    std::set<const void*> seen;
    std::map<const void*, std::size_t> pos;
    for (std::size_t i = 0; i < tape.entries().size(); ++i) {
        EXPECT_TRUE(seen.insert(tape.entries()[i].node).second);
        pos[tape.entries()[i].node] = i;
    }
    EXPECT_EQ(tape.size(), 6u);  // a, b, c, d, mul, sum
    for (const auto& en : tape.entries())
        for (const auto* in : en.inputs) EXPECT_LT(pos.at(en.node), pos.at(in)) << en.op;
}

TEST(Tape, ReusedTensorAccumulatesGradient) {
    auto a = Tensor::from({1}, {2.0}, true);
    backward(sum(add(mul(a, a), a)));  // d/da (a^2 + a) = 2a + 1
    EXPECT_EQ(a.grad()[0], 5.0);
    backward(sum(a));  // accumulates until zero_grad
    EXPECT_EQ(a.grad()[0], 6.0);
    a.zero_grad();
    EXPECT_EQ(a.grad()[0], 0.0);
}

TEST(Tape, NoGradGuardRecordsNothing) {
    auto a = rand_leaf({3}, 24);
    NoGradGuard g;
    auto y = mul(a, a);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, DataLengthMustMatchShape) {
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor::zeros({2}).item(), DimensionError);
    EXPECT_THROW(backward(rand_leaf({2}, 1)), DimensionError);
}

TEST(Tensor, ForwardIsDeterministic) {
    auto x = rand_leaf({6, 8}, 25), w = rand_leaf({8, 8}, 26);
    auto f = [&] { return softmax(matmul(layer_norm(x, Tensor::full({8}, 1), Tensor::zeros({8})), w), 1).values(); };
    EXPECT_EQ(f(), f());
}
