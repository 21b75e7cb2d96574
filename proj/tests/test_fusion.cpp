#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "ew/fusion.hpp"
#include "ew/gradcheck.hpp"
#include "ew/optim.hpp"

using namespace ew;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

Feature3D features(std::uint64_t seed, std::size_t d = 3) {
    Rng rng(seed);
    const Extractor3D ex(4, 8);
    return ex.extract(VideoLatent(Tensor::randn({4, 8, 8, d}, rng)));
}

}  // namespace

TEST(Extractor, TemporalExtentFollowsFrameCount) {
    for (std::size_t d : {1u, 2u, 3u, 21u}) EXPECT_EQ(features(1, d).data.dim(3), 4 * (d - 1) + 1) << "d=" << d;
    EXPECT_EQ(features(1).data.dim(0), 8u);
    EXPECT_STREQ(features(1).version.c_str(), Extractor3D::kVersion);
}

TEST(Extractor, FrozenAndDeterministic) {
    const Extractor3D a(4, 8), b(4, 8);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        EXPECT_FALSE(a.parameters()[i].tensor.requires_grad());
        EXPECT_EQ(a.parameters()[i].tensor.values(), b.parameters()[i].tensor.values());
    }
}

TEST(Extractor, WrongChannelCountRejected) {
    const Extractor3D ex(4, 8);
    EXPECT_THROW(ex.extract(VideoLatent(Tensor::zeros({3, 8, 8, 3}))), DimensionError);
}

TEST(Extractor, DifferentiableWithRespectToLatent) {
    const Extractor3D ex(2, 3);
    Rng rng(2);
    auto lat = Tensor::randn({2, 4, 4, 2}, rng, 1.0, true);
    const auto r = check_gradients([&] { return project_to_scalar(ex.extract(VideoLatent(lat)).data); }, {lat});
    EXPECT_LT(r.rel_error, 1e-6);
}

TEST(Fusion, FreshModuleIsIdentityOnText) {
    const FusionNet net(FusionConfig{}, 4);
    const auto text = make_text_embedding(4, 16, 1);
    const auto out = fuse(net, text, features(5));
    EXPECT_TRUE(bit_equal(out.tokens, text.tokens));
    EXPECT_EQ(out.provenance, Provenance::Fused);
}

TEST(Fusion, OneUpdateBreaksIdentity) {
    FusionNet net(FusionConfig{}, 4);
    const auto text = make_text_embedding(4, 16, 1);
    const auto f = features(5);
    Adam opt(tensors_of(net.parameters()), {1e-2});
    opt.zero_grad();
    Rng rng(6);
    backward(sum(mul(fuse(net, text, f).tokens, Tensor::randn({4, 16}, rng))));
    EXPECT_GT(net.zero_conv_weight().grad_norm(), 0.0);
    // With the zero conv at zero nothing upstream of it receives gradient yet.
    EXPECT_EQ(net.projection_weight().grad_norm(), 0.0);
    opt.step();
    EXPECT_FALSE(bit_equal(fuse(net, text, f).tokens, text.tokens));
}

TEST(Fusion, MissingFeaturesBypass) {
    const FusionNet net(FusionConfig{}, 4);
    const auto text = make_text_embedding(4, 16, 1);
    const auto out = fuse_optional(net, text, std::nullopt);
    EXPECT_EQ(out.provenance, Provenance::TextOnly);
    EXPECT_TRUE(bit_equal(out.tokens, text.tokens));
}

TEST(Fusion, ShapeMismatchesRejected) {
    const FusionNet net(FusionConfig{}, 4);
    const auto text = make_text_embedding(4, 16, 1);
    EXPECT_THROW(fuse(net, text, features(5, 2)), DimensionError);  // d' = 5, expected 9
    EXPECT_THROW(fuse(net, make_text_embedding(3, 16, 1), features(5)), DimensionError);
}

TEST(Fusion, GradientMatchesFiniteDifferences) {
    FusionNet net(FusionConfig{2, 4, 3, 5}, 9);
    Rng rng(10);
    for (auto& p : net.parameters()) {
        auto w = p.tensor.mutable_data();
        for (auto& v : w) v += 0.2 * rng.normal();
    }
    auto feat = Tensor::randn({3, 2, 2, 5}, rng, 1.0, true);
    const auto text = make_text_embedding(2, 4, 3);
    auto ins = tensors_of(net.parameters());
    ins.push_back(feat);
    const auto r = check_gradients([&] { return project_to_scalar(fuse(net, text, Feature3D{feat, "t"}).tokens); }, ins);
    EXPECT_LT(r.rel_error, 1e-6);
}

TEST(Fusion, SaveLoadRoundTrip) {
    FusionNet net(FusionConfig{}, 4);
    net.parameters()[3].tensor.mutable_data()[0] = 0.25;
    const auto path = (std::filesystem::temp_directory_path() / "ew_test_fusion.ewfu").string();
    net.save(path, 7);
    std::uint64_t h = 0;
    const auto back = FusionNet::load(path, &h);
    std::filesystem::remove(path);
    EXPECT_EQ(h, 7u);
    EXPECT_EQ(back.config(), net.config());
    for (std::size_t i = 0; i < net.parameters().size(); ++i)
        EXPECT_TRUE(bit_equal(back.parameters()[i].tensor, net.parameters()[i].tensor));
}
