#include <gtest/gtest.h>

#include <cmath>

#include "hspec/nn.hpp"
#include "hspec/optim.hpp"
#include "hspec/tensor.hpp"

using namespace hspec;

TEST(Matmul, IdentityAndHandCases) {
    Tensor<float> I({2, 2}, {1, 0, 0, 1});
    Tensor<float> A({2, 2}, {1, 2, 3, 4});
    auto C = matmul(I, A);
    EXPECT_EQ(C.data(), A.data());

    Tensor<float> r({1, 2}, {1, 2});
    Tensor<float> c({2, 1}, {3, 4});
    EXPECT_FLOAT_EQ(matmul(r, c).item(), 11.0f);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    Rng rng(11);
    const int m = 5, k = 7, n = 3;
    Tensor<double> a = Tensor<double>::randn({m, k}, rng);
    Tensor<double> b = Tensor<double>::randn({k, n}, rng);
    auto c = matmul(a, b);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int t = 0; t < k; ++t) acc += a.data()[size_t(i * k + t)] * b.data()[size_t(t * n + j)];
            EXPECT_NEAR(c.data()[size_t(i * n + j)], acc, 1e-6);
        }
}

TEST(Matmul, ShapeMismatchThrows) {
    Tensor<float> a({2, 3});
    Tensor<float> b({4, 2});
    EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Softmax, UniformAndAnalyticCases) {
    Tensor<float> z({1, 4}, {0, 0, 0, 0});
    auto p = softmax(z);
    for (float v : p.data()) EXPECT_NEAR(v, 0.25f, 1e-6f);

    Tensor<float> x({1, 2}, {std::log(3.0f), 0.0f});
    auto q = softmax(x);
    EXPECT_NEAR(q.data()[0], 0.75f, 1e-6f);
    EXPECT_NEAR(q.data()[1], 0.25f, 1e-6f);
}

TEST(Softmax, TemperatureScalesLikeLogits) {
    Tensor<float> a({1, 2}, {2, 1});
    Tensor<float> b({1, 2}, {4, 2});
    auto pa = softmax(a, 0.5f);
    auto pb = softmax(b, 1.0f);
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(pa.data()[size_t(j)], pb.data()[size_t(j)], 1e-6f);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    Rng rng(3);
    Tensor<double> x = Tensor<double>::randn({6, 9}, rng, 4.0);
    auto p = softmax(x);
    for (int r = 0; r < 6; ++r) {
        double s = 0;
        for (int j = 0; j < 9; ++j) s += p.data()[size_t(r * 9 + j)];
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
    Tensor<double> shifted = x;
    {
        std::vector<double> d = x.data();
        for (auto& v : d) v += 123.5;
        shifted = Tensor<double>({6, 9}, d);
    }
    auto q = softmax(shifted);
    for (size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(p.data()[i], q.data()[i], 1e-9);
}

TEST(Softmax, RejectsBadInput) {
    Tensor<float> x({1, 2}, {std::numeric_limits<float>::quiet_NaN(), 0.0f});
    EXPECT_THROW(softmax(x), NumericError);
    Tensor<float> y({1, 2}, {0.0f, 0.0f});
    EXPECT_THROW(softmax(y, 0.0f), InputError);
}

TEST(CrossEntropySoft, UniformLogitsOneHotTarget) {
    Tensor<float> logits({1, 4}, {0, 0, 0, 0});
    Tensor<float> target({1, 4}, {0, 1, 0, 0});
    EXPECT_NEAR(cross_entropy_soft(logits, target).item(), std::log(4.0f), 1e-6f);
}

TEST(CrossEntropySoft, SelfTargetGivesEntropy) {
    Rng rng(5);
    Tensor<double> logits = Tensor<double>::randn({2, 6}, rng);
    Tensor<double> target = softmax(logits);
    double H = 0;
    for (double v : target.data()) H -= v * std::log(v);
    H /= 2.0;  // mean over the two rows
    EXPECT_NEAR(cross_entropy_soft(logits, target).item(), H, 1e-9);
}

TEST(CrossEntropySoft, MatchesSummationOracle) {
    Rng rng(7);
    Tensor<double> logits = Tensor<double>::randn({3, 5}, rng);
    Tensor<double> target = softmax(Tensor<double>::randn({3, 5}, rng));
    double want = 0;
    for (int r = 0; r < 3; ++r) {
        double mx = -1e300, lse = 0;
        for (int j = 0; j < 5; ++j) mx = std::max(mx, logits.data()[size_t(r * 5 + j)]);
        for (int j = 0; j < 5; ++j) lse += std::exp(logits.data()[size_t(r * 5 + j)] - mx);
        lse = mx + std::log(lse);
        for (int j = 0; j < 5; ++j)
            want -= target.data()[size_t(r * 5 + j)] * (logits.data()[size_t(r * 5 + j)] - lse);
    }
    want /= 3.0;
    EXPECT_NEAR(cross_entropy_soft(logits, target).item(), want, 1e-6);
}

TEST(CrossEntropySoft, RejectsUnnormalizedTarget) {
    Tensor<float> logits({1, 3}, {0, 0, 0});
    Tensor<float> target({1, 3}, {0.5f, 0.2f, 0.2f});
    EXPECT_THROW(cross_entropy_soft(logits, target), InputError);
}

TEST(Backward, SumOfSquaresGradient) {
    Tensor<double> x({3}, {1, 2, 3});
    x.set_requires_grad();
    auto loss = sum(mul(x, x));
    backward(loss);
    const auto g = x.grad();
    EXPECT_DOUBLE_EQ(g[0], 2);
    EXPECT_DOUBLE_EQ(g[1], 4);
    EXPECT_DOUBLE_EQ(g[2], 6);
}

TEST(Backward, FanOutAccumulatesAdditively) {
    Tensor<double> x({2}, {3, 4});
    x.set_requires_grad();
    auto loss = sum(add(x, x));
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2);
    EXPECT_DOUBLE_EQ(x.grad()[1], 2);
}

TEST(Backward, DisconnectedParameterStaysZero) {
    Tensor<double> x({2}, {1, 1});
    Tensor<double> y({2}, {5, 5});
    x.set_requires_grad();
    y.set_requires_grad();
    auto loss = sum(x);
    backward(loss);
    EXPECT_DOUBLE_EQ(y.grad()[0], 0);
    EXPECT_DOUBLE_EQ(y.grad()[1], 0);
}

TEST(Backward, RequiresScalarLoss) {
    Tensor<double> x({2}, {1, 2});
    x.set_requires_grad();
    auto y = add(x, x);
    EXPECT_THROW(backward(y), InputError);
}

TEST(AdamW, FirstStepUnitGradientMovesByLr) {
    // Bias correction cancels on step 1: mhat = vhat = 1, update = lr.
    Tensor<double> p({2}, {0.5, -0.25});
    p.set_requires_grad();
    p.grad_ref().assign(2, 1.0);
    AdamW<double> opt;
    opt.eps = 0;
    const double lr = 0.1;
    opt.step(p, lr);
    EXPECT_NEAR(p.data()[0], 0.5 - lr, 1e-12);
    EXPECT_NEAR(p.data()[1], -0.25 - lr, 1e-12);
}

TEST(AdamW, ZeroGradientFixedPointAndDecoupledDecay) {
    Tensor<double> p({1}, {2.0});
    p.set_requires_grad();
    p.grad_ref().assign(1, 0.0);
    AdamW<double> opt;
    opt.step(p, 0.1);
    EXPECT_DOUBLE_EQ(p.data()[0], 2.0);

    Tensor<double> q({1}, {2.0});
    q.set_requires_grad();
    q.grad_ref().assign(1, 0.0);
    AdamW<double> wd;
    wd.weight_decay = 0.5;
    wd.step(q, 0.1);
    EXPECT_NEAR(q.data()[0], 2.0 - 0.1 * 0.5 * 2.0, 1e-12);
}

TEST(AdamW, Deterministic) {
    auto run = [] {
        Tensor<double> p({3}, {1, 2, 3});
        p.set_requires_grad();
        AdamW<double> opt;
        for (int s = 0; s < 5; ++s) {
            p.grad_ref().assign({0.1, -0.2, 0.3});
            opt.step(p, 0.01);
        }
        return p.data();
    };
    EXPECT_EQ(run(), run());
}

TEST(CosineLr, Boundaries) {
    EXPECT_DOUBLE_EQ(cosine_lr(10, 10, 100, 1e-3), 1e-3);
    EXPECT_DOUBLE_EQ(cosine_lr(100, 10, 100, 1e-3), 0.0);
    EXPECT_DOUBLE_EQ(cosine_lr(200, 10, 100, 1e-3), 0.0);  // clamps past the end
    EXPECT_NEAR(cosine_lr(55, 10, 100, 1e-3), 0.5e-3, 1e-12);
}

TEST(CosineLr, RampAndMonotoneDecay) {
    double prev = 0;
    for (long s = 0; s < 10; ++s) {
        const double lr = cosine_lr(s, 10, 100, 1.0);
        EXPECT_GE(lr, prev);
        EXPECT_LE(lr, 1.0);
        prev = lr;
    }
    prev = 1.0;
    for (long s = 10; s <= 100; ++s) {
        const double lr = cosine_lr(s, 10, 100, 1.0);
        EXPECT_LE(lr, prev + 1e-15);
        EXPECT_GE(lr, 0.0);
        prev = lr;
    }
}

TEST(Rng, DeterministicStreamsAndForks) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c(42);
    Rng f1 = c.fork(1);
    Rng c2(42);
    Rng f2 = c2.fork(1);
    EXPECT_EQ(f1.next_u64(), f2.next_u64());
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}
