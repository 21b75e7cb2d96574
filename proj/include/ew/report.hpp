#pragma once

// JSON forms of the run reports. Every record carries the config hash.

#include <cstdint>
#include <string>

#include "ew/config.hpp"
#include "ew/streamer.hpp"
#include "ew/trainer.hpp"

namespace ew {

inline Json to_json(const StepReport& r, std::uint64_t hash) {
    return {{"config_hash", hash_hex(hash)}, {"step", r.step},
            {"mask_t", r.mask_t},            {"boundary_chunk", r.boundary_chunk},
            {"loss_gen", r.loss_gen},        {"loss_3d", r.loss_3d},
            {"loss_total", r.loss_total},    {"grad_prefix", r.grad_prefix},
            {"grad_suffix", r.grad_suffix},  {"grad_fusion", r.grad_fusion},
            {"grad_generator", r.grad_generator}};
}

inline Json to_json(const DriftReport& r, std::uint64_t hash) {
    return {{"config_hash", hash_hex(hash)},
            {"chunks", r.chunks},
            {"divergence_detached", r.divergence_detached},
            {"divergence_baseline", r.divergence_baseline},
            {"prefix_grad_detached", r.prefix_grad_detached},
            {"prefix_grad_baseline", r.prefix_grad_baseline}};
}

inline Json to_json(const ChunkReport& c) {
    return {{"index", c.index},
            {"mode", to_string(c.mode)},
            {"wall_ms", c.wall_ms},
            {"live_tokens", c.live_tokens},
            {"cache_bytes", c.cache_bytes},
            {"tokens_attended", c.tokens_attended},
            {"feature_drift", c.feature_drift}};
}

inline Json to_json(const StreamReport& r, std::uint64_t hash) {
    Json chunks = Json::array();
    for (const auto& c : r.chunks) chunks.push_back(to_json(c));
    return {{"config_hash", hash_hex(hash)},
            {"latents_emitted", r.latents_emitted},
            {"total_latents", r.total_latents},
            {"total_frames", r.total_frames},
            {"max_live_tokens", r.max_live_tokens},
            {"live_token_bound", r.live_token_bound},
            {"stopped", r.stopped},
            {"chunks", std::move(chunks)}};
}

}  // namespace ew
