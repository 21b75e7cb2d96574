#pragma once

// Latent video containers and latent <-> frame accounting.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ew/errors.hpp"
#include "ew/tensor.hpp"

namespace ew {

/// Latent frames per generation chunk.
inline constexpr std::size_t kChunkLatents = 3;

/// Decoded frame count for d latent frames: 4(d-1)+1.
inline std::uint64_t frames_for_latents(std::uint64_t d) {
    if (d == 0) throw DomainError("frames_for_latents: latent count must be >= 1");
    return 4 * (d - 1) + 1;
}

/// Latent of shape [c x h x w x d]; time is the fastest-varying axis.
struct VideoLatent {
    Tensor data;

    VideoLatent() : data(Tensor::zeros({0, 0, 0, 0})) {}
    explicit VideoLatent(Tensor t) : data(std::move(t)) {
        if (data.rank() != 4) throw DimensionError("VideoLatent must be rank 4, got " + shape_str(data.shape()));
    }

    std::size_t channels() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }
    std::size_t latents() const { return data.dim(3); }
    bool empty() const { return data.numel() == 0; }
    std::uint64_t frames() const { return latents() ? frames_for_latents(latents()) : 0; }
};

/// Exactly kChunkLatents consecutive latent frames.
struct LatentChunk {
    Tensor data;

    LatentChunk() = default;
    explicit LatentChunk(Tensor t) : data(std::move(t)) {
        if (data.rank() != 4 || data.dim(3) != kChunkLatents)
            throw DimensionError("LatentChunk must be [c x h x w x 3], got " + shape_str(data.shape()));
    }
};

/// Concatenates [c,h,w,d_i] tensors along time.
inline Tensor concat_time(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_time of nothing");
    const std::size_t c = parts[0].dim(0), h = parts[0].dim(1), w = parts[0].dim(2);
    const std::size_t sites = c * h * w;
    std::size_t total = 0;
    std::vector<Tensor> flat;
    std::vector<std::size_t> off, len;
    for (const auto& p : parts) {
        if (p.rank() != 4 || p.dim(0) != c || p.dim(1) != h || p.dim(2) != w)
            throw DimensionError("concat_time: spatial shape mismatch");
        off.push_back(total * sites);
        len.push_back(p.dim(3));
        total += p.dim(3);
        flat.push_back(reshape(p, {p.numel()}));
    }
    if (parts.size() == 1) return parts[0];
    auto idx = std::make_shared<std::vector<std::size_t>>(sites * total);
    std::size_t t0 = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t s = 0; s < sites; ++s)
            for (std::size_t t = 0; t < len[k]; ++t) (*idx)[s * total + t0 + t] = off[k] + s * len[k] + t;
        t0 += len[k];
    }
    return gather(concat_rows(flat), idx, {c, h, w, total});
}

/// Latent frames [begin, begin+count) of a [c,h,w,d] tensor.
inline Tensor time_slice(const Tensor& v, std::size_t begin, std::size_t count) {
    if (v.rank() != 4 || begin + count > v.dim(3)) throw DimensionError("time_slice out of range");
    const std::size_t sites = v.dim(0) * v.dim(1) * v.dim(2), d = v.dim(3);
    auto idx = std::make_shared<std::vector<std::size_t>>(sites * count);
    for (std::size_t s = 0; s < sites; ++s)
        for (std::size_t t = 0; t < count; ++t) (*idx)[s * count + t] = s * d + begin + t;
    return gather(v, idx, {v.dim(0), v.dim(1), v.dim(2), count});
}

/// Repeats latents along time to the decoded length 4(d-1)+1: decoded frame j
/// takes latent ceil(j/4), so frame 0 maps to latent 0 and each later latent covers four frames.
inline Tensor temporal_upsample(const Tensor& v) {
    if (v.rank() != 4) throw DimensionError("temporal_upsample needs [c,h,w,d]");
    const std::size_t sites = v.dim(0) * v.dim(1) * v.dim(2), d = v.dim(3);
    const std::size_t dp = frames_for_latents(d);
    auto idx = std::make_shared<std::vector<std::size_t>>(sites * dp);
    for (std::size_t s = 0; s < sites; ++s)
        for (std::size_t j = 0; j < dp; ++j) (*idx)[s * dp + j] = s * d + (j + 3) / 4;
    return gather(v, idx, {v.dim(0), v.dim(1), v.dim(2), dp});
}

}  // namespace ew
