#pragma once

// Frozen toy 3D feature extractor and the text/3D fusion module.
//
// fuse(): e_fused = e_text + zero_conv(temporal_map(spatial_mean(proj_conv(f3d))))
// The zero conv starts at exactly zero, so an untrained module is the identity on e_text.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>

#include "ew/binary_io.hpp"
#include "ew/errors.hpp"
#include "ew/params.hpp"
#include "ew/rng.hpp"
#include "ew/tensor.hpp"
#include "ew/video.hpp"

namespace ew {

/// Feature grid [c' x h' x w' x d'] with d' the decoded frame count of the source latent.
struct Feature3D {
    Tensor data;
    std::string version;
};

struct TextEmbedding {
    Tensor tokens;  // [n_tok x dim]

    TextEmbedding() = default;
    explicit TextEmbedding(Tensor t) : tokens(std::move(t)) {
        if (tokens.rank() != 2 || tokens.dim(0) < 1) throw DimensionError("text embedding must be [n_tok>=1 x dim]");
    }
};

enum class Provenance : std::uint8_t { TextOnly = 0, Fused = 1 };

struct FusedEmbedding {
    Tensor tokens;  // same shape as the source text embedding
    Provenance provenance = Provenance::TextOnly;
};

/// Deterministic stand-in for a prompt encoding.
inline TextEmbedding make_text_embedding(std::size_t n_tok, std::size_t dim, std::uint64_t seed) {
    auto rng = Rng::derive(seed, 0x7e47, 0);
    return TextEmbedding(Tensor::randn({n_tok, dim}, rng));
}

/// Frozen random conv stack (3x3 conv, SiLU, 1x1 conv) applied per decoded frame.
class Extractor3D {
public:
    static constexpr const char* kVersion = "toy-3d-extractor/1";
    static constexpr std::uint64_t kSeed = 0x3d3d3d3dull;

    Extractor3D(std::size_t in_channels, std::size_t feature_channels)
        : in_(in_channels), out_(feature_channels) {
        auto rng = Rng::derive(kSeed, in_channels, feature_channels);
        w1_ = Tensor::randn({out_, in_, 3, 3}, rng, 1.0 / std::sqrt(9.0 * static_cast<double>(in_)));
        b1_ = Tensor::randn({out_}, rng, 0.1);
        w2_ = Tensor::randn({out_, out_, 1, 1}, rng, 1.0 / std::sqrt(static_cast<double>(out_)));
        b2_ = Tensor::randn({out_}, rng, 0.1);
    }

    /// Latent [c,h,w,d] -> feature [c',h,w,4(d-1)+1]. Differentiable w.r.t. the latent only.
    Feature3D extract(const VideoLatent& latent) const {
        if (latent.channels() != in_)
            throw DimensionError("extractor expects " + std::to_string(in_) + " latent channels");
        const Tensor up = temporal_upsample(latent.data);
        return {conv2d(silu(conv2d(up, w1_, b1_)), w2_, b2_), kVersion};
    }

    std::size_t feature_channels() const { return out_; }

    ParamList parameters() const { return {{"ext.w1", w1_}, {"ext.b1", b1_}, {"ext.w2", w2_}, {"ext.b2", b2_}}; }

private:
    std::size_t in_, out_;
    Tensor w1_, b1_, w2_, b2_;
};

inline Feature3D extract_3d(const Extractor3D& ex, const VideoLatent& latent) { return ex.extract(latent); }

struct FusionConfig {
    std::size_t text_tokens = 4;
    std::size_t text_dim = 16;
    std::size_t feature_channels = 8;
    std::size_t feature_frames = 9;  // d' expected by the temporal map

    friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

class FusionNet {
public:
    static constexpr std::uint32_t kVersion = 1;

    FusionNet(const FusionConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        auto rng = Rng::derive(seed, 0xf0510, 0);
        const auto E = cfg.text_dim, C = cfg.feature_channels, F = cfg.feature_frames;
        proj_w_ = Tensor::randn({E, C, 1, 1}, rng, 1.0 / std::sqrt(static_cast<double>(C)), true);
        proj_b_ = Tensor::zeros({E}, true);
        temporal_ = Tensor::randn({F, cfg.text_tokens}, rng, 1.0 / std::sqrt(static_cast<double>(F)), true);
        zero_w_ = Tensor::zeros({E, E, 1, 1}, true);
        zero_b_ = Tensor::zeros({E}, true);
    }

    const FusionConfig& config() const { return cfg_; }

    ParamList parameters() const {
        return {{"fusion.proj_w", proj_w_}, {"fusion.proj_b", proj_b_}, {"fusion.temporal", temporal_},
                {"fusion.zero_w", zero_w_}, {"fusion.zero_b", zero_b_}};
    }

    const Tensor& zero_conv_weight() const { return zero_w_; }
    const Tensor& zero_conv_bias() const { return zero_b_; }
    const Tensor& projection_weight() const { return proj_w_; }

    /// Injection term added to the text embedding, [n_tok x E].
    Tensor injection(const Feature3D& f3d) const {
        const auto& s = f3d.data.shape();
        if (s.size() != 4 || s[0] != cfg_.feature_channels || s[3] != cfg_.feature_frames)
            throw DimensionError("fusion: feature " + shape_str(s) + " does not match configured channels " +
                                 std::to_string(cfg_.feature_channels) + " / temporal extent " +
                                 std::to_string(cfg_.feature_frames));
        const auto E = cfg_.text_dim, n = cfg_.text_tokens;
        Tensor p = conv2d(f3d.data, proj_w_, proj_b_);                   // [E,h,w,d']
        p = mean_axis(reshape(p, {E, s[1] * s[2], s[3]}), 1);            // [E,d']
        p = matmul(p, temporal_);                                        // [E,n]
        p = conv2d(reshape(p, {E, n, 1, 1}), zero_w_, zero_b_);          // zero conv
        return transpose(reshape(p, {E, n}));                            // [n,E]
    }

    void save(const std::string& path, std::uint64_t config_hash) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("cannot open " + path + " for writing");
        io::write_magic(os, "EWFU");
        io::write_u32(os, kVersion);
        io::write_u64(os, config_hash);
        for (auto v : {cfg_.text_tokens, cfg_.text_dim, cfg_.feature_channels, cfg_.feature_frames})
            io::write_u32(os, static_cast<std::uint32_t>(v));
        write_params(os, parameters());
    }

    static FusionNet load(const std::string& path, std::uint64_t* config_hash = nullptr) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open " + path);
        io::expect_magic(is, "EWFU");
        if (io::read_u32(is) != kVersion) throw FormatError("unsupported EWFU version");
        const auto h = io::read_u64(is);
        if (config_hash) *config_hash = h;
        FusionConfig c;
        c.text_tokens = io::read_u32(is);
        c.text_dim = io::read_u32(is);
        c.feature_channels = io::read_u32(is);
        c.feature_frames = io::read_u32(is);
        FusionNet net(c, 0);
        auto ps = net.parameters();
        read_params_into(is, ps);
        return net;
    }

private:
    FusionConfig cfg_;
    Tensor proj_w_, proj_b_, temporal_, zero_w_, zero_b_;
};

/// e_fused = e_text + injection(f3d).
inline FusedEmbedding fuse(const FusionNet& net, const TextEmbedding& text, const Feature3D& f3d) {
    if (text.tokens.dim(0) != net.config().text_tokens || text.tokens.dim(1) != net.config().text_dim)
        throw DimensionError("fusion: text embedding " + shape_str(text.tokens.shape()) + " does not match config");
    return {add(text.tokens, net.injection(f3d)), Provenance::Fused};
}

/// Text-only bypass when no 3D feature is available.
inline FusedEmbedding fuse_optional(const FusionNet& net, const TextEmbedding& text,
                                    const std::optional<Feature3D>& f3d) {
    if (!f3d) return {text.tokens, Provenance::TextOnly};
    return fuse(net, text, *f3d);
}

}  // namespace ew
