#include <gtest/gtest.h>

#include <cmath>

#include "ew/gradcheck.hpp"
#include "ew/losses.hpp"

using namespace ew;

TEST(Loss3D, IdenticalFeaturesGiveZero) {
    Rng rng(1);
    const auto f = Tensor::randn({4, 2, 2, 3}, rng);
    EXPECT_NEAR(loss_3d(f, f).item(), 0.0, 1e-15);
    EXPECT_NEAR(loss_3d(f, scale(f, -1.0)).item(), 2.0, 1e-15);
}

TEST(Loss3D, DegenerateFeatureRejected) {
    EXPECT_THROW(loss_3d(Tensor::zeros({3}), Tensor::from({3}, {1, 2, 3})), DegenerateNormError);
}

TEST(Loss3D, GradientMatchesFiniteDifferences) {
    Rng rng(2);
    auto a = Tensor::randn({12}, rng, 1.0, true), b = Tensor::randn({12}, rng, 1.0, true);
    EXPECT_LT(check_gradients([&] { return loss_3d(a, b); }, {a, b}).rel_error, 1e-6);
}

TEST(TotalLoss, SensitivityToThreeDTermIsLambda) {
    for (double lambda : {0.0, 0.1, 0.37, 2.0}) {
        auto gen = Tensor::from({}, {0.8}, true), l3d = Tensor::from({}, {0.3}, true);
        backward(total_loss(gen, l3d, LossWeights{lambda}));
        EXPECT_EQ(l3d.grad()[0], lambda);
        EXPECT_EQ(gen.grad()[0], 1.0);
    }
    EXPECT_EQ(LossWeights{}.lambda_3d, 0.1);
    EXPECT_THROW(total_loss(Tensor::scalar(0), Tensor::scalar(0), LossWeights{-0.1}), ConfigError);
}

TEST(Score, MatchesFiniteDifferenceOfLogDensity) {
    const auto m = GaussianSequenceScore::scalar(1.5, 0.7);
    const double a = 0.6, s = 0.8, x = -0.4;
    auto logp = [&](double y) {
        const double v = a * a * 0.7 + s * s;
        return -0.5 * (y - a * 1.5) * (y - a * 1.5) / v;
    };
    const std::vector<double> xs{x};
    EXPECT_NEAR(m.score(xs, a, s)[0], (logp(x + 1e-5) - logp(x - 1e-5)) / 2e-5, 1e-8);
}

TEST(Score, FitRecoversMoments) {
    Rng rng(3);
    std::vector<std::vector<double>> data;
    for (int i = 0; i < 4000; ++i) data.push_back({2.0 + 0.5 * rng.normal()});
    std::vector<std::span<const double>> spans(data.begin(), data.end());
    const auto m = GaussianSequenceScore::fit(spans, 1, 1, 0.0);
    EXPECT_NEAR(m.mean(0)(0), 2.0, 0.03);
    EXPECT_NEAR(m.cov(0)(0, 0), 0.25, 0.02);
}

TEST(Score, Ar1CovarianceStructure) {
    const auto m = GaussianSequenceScore::ar1(4, {0.5});
    EXPECT_EQ(m.cov(0)(0, 0), 1.0);
    EXPECT_EQ(m.cov(0)(0, 3), 0.125);
    EXPECT_EQ(m.cov(0)(2, 1), 0.5);
}

TEST(Score, LayoutErrors) {
    const auto m = GaussianSequenceScore::ar1(4, {0.5, 0.7});
    const std::vector<double> bad(6), few(4);
    EXPECT_THROW(m.score(bad, 1.0, 0.1), DimensionError);
    EXPECT_THROW(m.score(few, 1.0, 0.1), DimensionError);
}

TEST(Dmd, MatchedScoresGiveZeroGradient) {
    ScorePair sp;
    sp.real = sp.fake = GaussianSequenceScore::ar1(3, {0.9});
    sp.fitted = true;
    const DiffusionSchedule sched(5);
    Rng rng(4);
    const auto x = Tensor::randn({2, 3}, rng), n = Tensor::randn({2, 3}, rng);
    for (std::size_t t = 0; t < sched.size(); ++t) {
        const auto g = dmd_generator_grad(x, sp, t, n, sched, 0);
        for (double v : g.data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Dmd, GradientPointsFromFakeTowardReal) {
    // Fake N(0,1), real N(3,1): descending along g must raise the sample.
    ScorePair sp;
    sp.real = GaussianSequenceScore::scalar(3.0, 1.0);
    sp.fake = GaussianSequenceScore::scalar(0.0, 1.0);
    sp.fitted = true;
    const DiffusionSchedule sched(5);
    const auto g = dmd_generator_grad(Tensor::from({1}, {0.0}), sp, 2, Tensor::from({1}, {0.1}), sched, 0);
    EXPECT_LT(g[0], 0.0);
}

TEST(Dmd, StalenessAndRangeChecks) {
    ScorePair sp;
    sp.real = GaussianSequenceScore::scalar(0, 1);
    const DiffusionSchedule sched(5);
    const auto x = Tensor::from({1}, {0.0});
    EXPECT_THROW(dmd_generator_grad(x, sp, 1, x, sched, 0), StalenessError);
    const std::vector<double> v{0.0, 1.0};
    sp.refit({std::span<const double>(v)}, 1, 1, 10);
    EXPECT_NO_THROW(dmd_generator_grad(x, sp, 1, x, sched, 11));
    EXPECT_THROW(dmd_generator_grad(x, sp, 1, x, sched, 12), StalenessError);
    EXPECT_THROW(dmd_generator_grad(x, sp, 5, x, sched, 10), ScheduleError);
    EXPECT_THROW(dmd_generator_grad(x, sp, 1, Tensor::from({2}, {0, 0}), sched, 10), DimensionError);
}

TEST(Dmd, SurrogateGradientEqualsSuppliedDirection) {
    auto x = Tensor::from({4}, {1, 2, 3, 4}, true);
    const auto g = Tensor::from({4}, {0.4, -0.8, 0.0, 1.2});
    backward(dmd_surrogate_loss(x, g));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], g[i] / 4.0);
}

TEST(Dmd, GaussianKlClosedForm) {
    EXPECT_EQ(gaussian_kl(1, 2, 1, 2), 0.0);
    EXPECT_NEAR(gaussian_kl(0, 1, 3, 1), 4.5, 1e-15);
    EXPECT_NEAR(gaussian_kl(0, 4, 0, 1), 0.5 * (std::log(0.25) + 3.0), 1e-15);
}

TEST(Dmd, OneDimensionalToyConverges) {
    const auto r = train_gaussian_dmd(GaussianDmdConfig{});
    EXPECT_LT(r.final_kl, 0.01);
    EXPECT_NEAR(r.mean, 3.0, 0.1);
    EXPECT_LT(r.kl_trace.back(), r.kl_trace.front());
}
