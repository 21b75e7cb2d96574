#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ew/trainer.hpp"

using namespace ew;

namespace {

ModelConfig small_model() {
    ModelConfig mc;
    mc.generator.layers = 1;
    return mc;
}

std::vector<std::vector<double>> param_values(const Trainer& tr) {
    std::vector<std::vector<double>> out;
    for (const auto& p : tr.nets().gen.parameters()) out.push_back(p.tensor.values());
    for (const auto& p : tr.nets().fusion.parameters()) out.push_back(p.tensor.values());
    return out;
}

}  // namespace

TEST(Masking, FrameToLatentMapping) {
    EXPECT_EQ(latent_of_frame(1), 0u);
    for (std::size_t t = 2; t <= 5; ++t) EXPECT_EQ(latent_of_frame(t), 1u);
    EXPECT_EQ(latent_of_frame(81), 20u);
    EXPECT_THROW(latent_of_frame(0), DomainError);
}

TEST(Masking, PlanGeometry) {
    MaskingPlan p;
    EXPECT_EQ(p.latents(), 21u);
    EXPECT_EQ(p.chunks(), 7u);
    p.t = 3;  // would mask everything; one chunk stays as context
    EXPECT_EQ(p.boundary_chunk(), 1u);
    p.t = 78;
    EXPECT_EQ(p.boundary_chunk(), 6u);
    EXPECT_EQ(p.masked_latents(), (std::vector<std::size_t>{18, 19, 20}));
    p.t = 42;  // latent 11 -> chunk 3
    EXPECT_EQ(p.boundary_chunk(), 3u);
    EXPECT_EQ(mask_boundary(p.masked_latents(), p.chunks()), 3u);
}

TEST(Masking, InvalidStartRejected) {
    for (std::size_t t : {0u, 1u, 4u, 81u, 84u}) {
        MaskingPlan p;
        p.t = t;
        EXPECT_THROW(p.validate(), DomainError) << t;
    }
}

TEST(Masking, SampledStartIsUniform) {
    Rng rng(2024);
    std::map<std::size_t, std::size_t> counts;
    const std::size_t N = 26000;
    for (std::size_t i = 0; i < N; ++i) {
        const auto p = sample_masking_plan(rng);
        ASSERT_NO_THROW(p.validate());
        ++counts[p.t];
    }
    ASSERT_EQ(counts.size(), 26u);
    EXPECT_EQ(counts.begin()->first, 3u);
    EXPECT_EQ(counts.rbegin()->first, 78u);
    double chi2 = 0.0;
    const double expected = static_cast<double>(N) / 26.0;
    for (const auto& [t, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(chi2, 52.62);  // chi-square, 25 dof, p = 0.001
}

TEST(Masking, BoundaryValidation) {
    EXPECT_EQ(mask_boundary({}, 7), 7u);
    EXPECT_THROW(mask_boundary({4, 5, 6}, 7), AlignmentError);           // not aligned
    EXPECT_THROW(mask_boundary({3, 4, 5, 9, 10, 11}, 4), AlignmentError);  // gap
    EXPECT_THROW(mask_boundary({3, 4, 5}, 4), AlignmentError);            // not a suffix
    EXPECT_THROW(mask_boundary({21}, 7), AlignmentError);                 // out of range
}

TEST(Supervision, ProcessStatistics) {
    const auto p = SupervisionProcess::for_channels(4);
    EXPECT_LT(p.spectral_radius(), 1.0);
    Rng rng(3);
    const auto x = p.sample(rng, 16, 16, 400);
    for (std::size_t c = 0; c < 4; ++c) {
        double s01 = 0, s00 = 0;
        for (std::size_t site = 0; site < 256; ++site) {
            const std::size_t base = (c * 256 + site) * 400;
            for (std::size_t j = 0; j + 1 < 400; ++j) {
                s01 += x[base + j] * x[base + j + 1];
                s00 += x[base + j] * x[base + j];
            }
        }
        EXPECT_NEAR(s01 / s00, p.coeffs[c], 0.01) << "channel " << c;
    }
    EXPECT_DOUBLE_EQ(p.conditional_mean(3, 2.0, 2), 2.0 * 0.81);
}

TEST(TwoStep, RegenerationWithSameNoiseReproducesSuffix) {
    const auto mc = small_model();
    const Nets nets(mc, 1);
    const auto& g = mc.generator;
    Rng rng(4);
    std::vector<ChunkNoise> full;
    for (int k = 0; k < 4; ++k) full.push_back(ChunkNoise::draw(rng, g));
    const std::vector<ChunkNoise> regen(full.begin() + 2, full.end());
    const auto cond = [&](std::size_t, const std::vector<Tensor>&) { return nets.text_only(); };
    const auto rec = two_step_generate(nets.gen, g.cache_config(1, 11), 4, {6, 7, 8, 9, 10, 11}, full, regen, cond);
    EXPECT_EQ(rec.boundary_chunk, 2u);
    ASSERT_EQ(rec.regenerated.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(rec.regenerated[i].values(), rec.full[2 + i].values());
}

TEST(TwoStep, NoiseCountsChecked) {
    const auto mc = small_model();
    const Nets nets(mc, 1);
    Rng rng(4);
    std::vector<ChunkNoise> full{ChunkNoise::draw(rng, mc.generator), ChunkNoise::draw(rng, mc.generator)};
    const auto cond = [&](std::size_t, const std::vector<Tensor>&) { return nets.text_only(); };
    EXPECT_THROW(two_step_generate(nets.gen, mc.generator.cache_config(1, 5), 3, {}, full, {}, cond), ConfigError);
    EXPECT_THROW(two_step_generate(nets.gen, mc.generator.cache_config(1, 5), 2, {3, 4, 5}, full, {}, cond),
                 ConfigError);
}

TEST(Trainer, DetachWallHoldsAndBaselineLeaks) {
    for (bool det : {true, false}) {
        TrainConfig tc;
        tc.detach_conditioning = det;
        Trainer tr(tc, small_model(), 5);
        for (int i = 0; i < 4; ++i) {
            const auto r = tr.step();
            if (det)
                EXPECT_EQ(r.grad_prefix, 0.0);
            else
                EXPECT_GT(r.grad_prefix, 0.0);
            EXPECT_GT(r.grad_suffix, 0.0);
            EXPECT_GT(r.grad_generator, 0.0);
        }
    }
}

TEST(Trainer, SameSeedSameTrajectory) {
    TrainConfig tc;
    tc.seed = 9;
    Trainer a(tc, small_model(), 1), b(tc, small_model(), 1);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(a.step(), b.step());
    EXPECT_EQ(param_values(a), param_values(b));
}

TEST(Trainer, TotalIsGenPlusWeightedThreeD) {
    TrainConfig tc;
    tc.lambda_3d = 0.1;
    Trainer tr(tc, small_model(), 2);
    for (int i = 0; i < 3; ++i) {
        const auto r = tr.step();
        EXPECT_GT(r.loss_3d, 0.0);
        EXPECT_EQ(r.loss_total, r.loss_gen + 0.1 * r.loss_3d);
    }
}

TEST(Trainer, ZeroLambdaMakesThreeDToggleInert) {
    TrainConfig on, off;
    on.lambda_3d = off.lambda_3d = 0.0;
    on.enable_l3d = true;
    off.enable_l3d = false;
    Trainer a(on, small_model(), 3), b(off, small_model(), 3);
    for (int i = 0; i < 3; ++i) {
        const auto ra = a.step(), rb = b.step();
        EXPECT_EQ(ra.loss_gen, rb.loss_gen);
        EXPECT_EQ(ra.grad_generator, rb.grad_generator);
    }
    EXPECT_EQ(param_values(a), param_values(b));
}

TEST(Trainer, NonFiniteLossAborts) {
    Trainer tr(TrainConfig{}, small_model(), 4);
    tr.nets().gen.parameters()[0].tensor.mutable_data()[0] = std::nan("");
    try {
        tr.step();
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    }
}

TEST(Trainer, ConfigValidation) {
    TrainConfig tc;
    tc.lr = 0.0;
    EXPECT_THROW(Trainer(tc, small_model(), 0), ConfigError);
    tc = TrainConfig{};
    tc.optimizer = "sgd";
    EXPECT_THROW(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.lambda_3d = -1.0;
    EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Trainer, BatchesDrawOnePlanPerElement) {
    TrainConfig tc;
    tc.batch_size = 3;
    const auto b = sample_batch(tc, 11);
    EXPECT_EQ(b.plans.size(), 3u);
    EXPECT_EQ(b.step, 11u);
    EXPECT_EQ(sample_batch(tc, 11).plans, b.plans);
    Trainer tr(tc, small_model(), 0);
    EXPECT_TRUE(std::isfinite(tr.step().loss_total));
}

TEST(Drift, ConfigsMustDifferOnlyInDetach) {
    TrainConfig a, b;
    a.steps = b.steps = 1;
    b.detach_conditioning = false;
    b.lr = 0.5;
    EXPECT_THROW(drift_experiment(a, b, small_model(), 0, 2), ConfigError);
    EXPECT_THROW(drift_experiment(a, a, small_model(), 0, 2), ConfigError);
}

TEST(Drift, ReportsOneSeriesEntryPerChunk) {
    TrainConfig a, b;
    a.steps = b.steps = 2;
    b.detach_conditioning = false;
    const auto rep = drift_experiment(a, b, small_model(), 0, 4);
    EXPECT_EQ(rep.divergence_detached.size(), 4u);
    EXPECT_EQ(rep.divergence_baseline.size(), 4u);
    EXPECT_EQ(rep.divergence_detached[0], rep.divergence_baseline[0]);  // shared data chunk
    EXPECT_EQ(rep.prefix_grad_detached, (std::vector<double>{0.0, 0.0}));
    for (double v : rep.prefix_grad_baseline) EXPECT_GT(v, 0.0);
}
