#pragma once

// Unbounded-length generation with a fixed-size cache.
//
// Phases alternate strictly, starting with LongContext:
//   LongContext : sink + 17 recent latents of context, generates 3 latents (one chunk)
//   ShortContext: sink + 2 recent latents of context, generates 18 latents (six chunks)
// The window ring always keeps the latest 17 latents; a phase only changes how many of
// them attention sees, effective immediately at phase entry (retain_context=false evicts
// down to the phase budget instead). Entering a LongContext phase re-fuses the
// conditioning from the most recent chunk's 3D features.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ew/binary_io.hpp"
#include "ew/errors.hpp"
#include "ew/fusion.hpp"
#include "ew/generator.hpp"
#include "ew/params.hpp"
#include "ew/tensor.hpp"
#include "ew/trainer.hpp"
#include "ew/video.hpp"

namespace ew {

enum class ContextMode : std::uint32_t { LongContext = 0, ShortContext = 1 };

inline const char* to_string(ContextMode m) { return m == ContextMode::LongContext ? "long" : "short"; }

struct SchedulePhase {
    ContextMode mode = ContextMode::LongContext;
    std::size_t context_latents = 18;
    std::size_t generate_latents = 3;

    friend bool operator==(const SchedulePhase&, const SchedulePhase&) = default;
};

struct ScheduleConfig {
    std::size_t sink_latents = 1;
    std::size_t long_context = 18;
    std::size_t long_generate = 3;
    std::size_t short_context = 3;
    std::size_t short_generate = 18;
    /// true: the window keeps the latest W_max frames and each phase only narrows what attention
    /// sees; false: phase entry evicts down to the phase budget.
    bool retain_context = true;

    SchedulePhase phase(ContextMode m) const {
        return m == ContextMode::LongContext ? SchedulePhase{m, long_context, long_generate}
                                             : SchedulePhase{m, short_context, short_generate};
    }

    /// Recent (non-sink) latents kept in the window during a phase.
    std::size_t window_latents(ContextMode m) const { return phase(m).context_latents - sink_latents; }
    std::size_t max_window_latents() const {
        return std::max(window_latents(ContextMode::LongContext), window_latents(ContextMode::ShortContext));
    }

    void validate() const {
        if (sink_latents < 1) throw ConfigError("schedule: sink must hold at least one latent");
        for (auto m : {ContextMode::LongContext, ContextMode::ShortContext}) {
            const auto p = phase(m);
            if (p.context_latents <= sink_latents)
                throw ConfigError(std::string("schedule: ") + to_string(m) + " context must exceed the sink");
            if (p.generate_latents == 0 || p.generate_latents % kChunkLatents != 0)
                throw ConfigError(std::string("schedule: ") + to_string(m) +
                                  " generate budget must be a positive multiple of " + std::to_string(kChunkLatents));
        }
    }

    friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

/// How rotary positions are assigned; recorded in snapshots so a restore cannot silently change it.
enum class PositionPolicy : std::uint32_t { CompactLive = 0 };

struct PendingLatent {
    std::uint64_t chunk = 0;
    Tensor frame;  // [c,h,w,1]
};

struct RolloutState {
    static constexpr std::uint32_t kVersion = 1;

    GenerationState gen;
    ScheduleConfig schedule;
    PositionPolicy positions = PositionPolicy::CompactLive;
    std::uint64_t latents_emitted = 0;
    std::uint64_t phases_started = 0;
    std::uint64_t chunks_left_in_phase = 0;
    ContextMode mode = ContextMode::LongContext;
    std::optional<FusedEmbedding> conditioning;
    std::optional<Tensor> last_features;   // 3D features of the most recent chunk
    std::optional<Tensor> first_features;
    std::deque<PendingLatent> pending;

    static RolloutState fresh(const GeneratorConfig& g, const ScheduleConfig& sc, std::uint64_t seed) {
        sc.validate();
        RolloutState s;
        s.schedule = sc;
        s.gen = GenerationState(g.cache_config(sc.sink_latents, sc.max_window_latents()), seed);
        return s;
    }

    std::uint64_t frames_emitted() const { return latents_emitted ? frames_for_latents(latents_emitted) : 0; }

    /// EWST: magic, version u32, config hash u64, schedule u32 x 5, retain flag u32, position policy u32, counters u64 x 3,
    /// mode u32, optional blocks (flag u32 + payload), pending latents, then the generation state
    /// (rng string, chunk counter u64, EWKV cache).
    void save(const std::string& path, std::uint64_t config_hash) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("cannot open " + path + " for writing");
        io::write_magic(os, "EWST");
        io::write_u32(os, kVersion);
        io::write_u64(os, config_hash);
        for (auto v : {schedule.sink_latents, schedule.long_context, schedule.long_generate, schedule.short_context,
                       schedule.short_generate})
            io::write_u32(os, static_cast<std::uint32_t>(v));
        io::write_u32(os, schedule.retain_context ? 1u : 0u);
        io::write_u32(os, static_cast<std::uint32_t>(positions));
        io::write_u64(os, latents_emitted);
        io::write_u64(os, phases_started);
        io::write_u64(os, chunks_left_in_phase);
        io::write_u32(os, static_cast<std::uint32_t>(mode));
        io::write_u32(os, conditioning ? 1u : 0u);
        if (conditioning) {
            io::write_u32(os, static_cast<std::uint32_t>(conditioning->provenance));
            write_tensor(os, conditioning->tokens);
        }
        for (const auto* t : {&last_features, &first_features}) {
            io::write_u32(os, *t ? 1u : 0u);
            if (*t) write_tensor(os, **t);
        }
        io::write_u64(os, pending.size());
        for (const auto& p : pending) {
            io::write_u64(os, p.chunk);
            write_tensor(os, p.frame);
        }
        gen.write(os);
        if (!os) throw FormatError("failed writing " + path);
    }

    static RolloutState load(const std::string& path, std::uint64_t* config_hash = nullptr) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open " + path);
        io::expect_magic(is, "EWST");
        if (io::read_u32(is) != kVersion) throw FormatError("unsupported EWST version");
        const auto h = io::read_u64(is);
        if (config_hash) *config_hash = h;
        RolloutState s;
        for (auto* f : {&s.schedule.sink_latents, &s.schedule.long_context, &s.schedule.long_generate,
                        &s.schedule.short_context, &s.schedule.short_generate})
            *f = io::read_u32(is);
        s.schedule.retain_context = io::read_u32(is) != 0;
        s.schedule.validate();
        if (io::read_u32(is) != static_cast<std::uint32_t>(PositionPolicy::CompactLive))
            throw FormatError("unknown rotary position policy");
        s.latents_emitted = io::read_u64(is);
        s.phases_started = io::read_u64(is);
        s.chunks_left_in_phase = io::read_u64(is);
        const auto mode = io::read_u32(is);
        if (mode > 1) throw FormatError("bad context mode");
        s.mode = static_cast<ContextMode>(mode);
        if (io::read_u32(is)) {
            FusedEmbedding e;
            e.provenance = static_cast<Provenance>(io::read_u32(is));
            e.tokens = read_tensor(is);
            s.conditioning = std::move(e);
        }
        for (auto* t : {&s.last_features, &s.first_features})
            if (io::read_u32(is)) *t = read_tensor(is);
        const auto n_pending = io::read_u64(is);
        for (std::uint64_t i = 0; i < n_pending; ++i) {
            PendingLatent p;
            p.chunk = io::read_u64(is);
            p.frame = read_tensor(is);
            s.pending.push_back(std::move(p));
        }
        s.gen = GenerationState::read(is);
        return s;
    }
};

/// Strict alternation, LongContext first. Advances the state's phase counter.
inline SchedulePhase next_phase(RolloutState& state) {
    const auto m = state.phases_started % 2 == 0 ? ContextMode::LongContext : ContextMode::ShortContext;
    ++state.phases_started;
    state.mode = m;
    return state.schedule.phase(m);
}

struct ChunkReport {
    std::uint64_t index = 0;
    ContextMode mode = ContextMode::LongContext;
    double wall_ms = 0.0;
    std::size_t live_tokens = 0;       // held in the cache after the chunk was committed
    std::size_t cache_bytes = 0;
    std::size_t tokens_attended = 0;   // keys seen by the chunk's queries (cache + own block)
    double feature_drift = 0.0;        // 1 - cos(features(chunk), features(chunk 0))
};

struct StreamReport {
    std::vector<ChunkReport> chunks;
    std::uint64_t latents_emitted = 0;   // by this call
    std::uint64_t total_latents = 0;     // since the state was created
    std::uint64_t total_frames = 0;      // frames_for_latents(total_latents)
    std::size_t max_live_tokens = 0;
    std::size_t live_token_bound = 0;    // sink + max window
    bool stopped = false;
};

/// Receives each emitted latent frame in order.
using LatentSink = std::function<void(std::uint64_t chunk_index, const Tensor& frame)>;

struct StreamHooks {
    LatentSink sink;
    /// Called after each generated chunk, once its latents have been handed to the sink.
    std::function<void(const ChunkReport&, const RolloutState&)> on_chunk;
    const std::atomic<bool>* stop = nullptr;
};

/// Emits `target` more latents (nullopt: until stopped). A stop request is honoured at the
/// next chunk boundary; the chunk in flight is always finished.
inline StreamReport stream(const Nets& nets, RolloutState& state, std::optional<std::uint64_t> target,
                           const StreamHooks& hooks = {}) {
    NoGradGuard ng;
    const auto& g = nets.gen.config();
    const auto tpf = g.tokens_per_frame();
    StreamReport rep;
    rep.live_token_bound = (state.schedule.sink_latents + state.schedule.max_window_latents()) * tpf;
    if (!target && !hooks.stop) throw ConfigError("infinite stream needs a stop signal");
    auto stop_requested = [&] { return hooks.stop && hooks.stop->load(); };
    auto want_more = [&] { return !target || rep.latents_emitted < *target; };
    auto drain = [&] {
        while (want_more() && !state.pending.empty()) {
            const auto& p = state.pending.front();
            if (hooks.sink) hooks.sink(p.chunk, p.frame);
            state.pending.pop_front();
            ++state.latents_emitted;
            ++rep.latents_emitted;
        }
    };

    drain();
    while (want_more() && !stop_requested()) {
        const auto t0 = std::chrono::steady_clock::now();
        if (state.chunks_left_in_phase == 0) {
            const auto ph = next_phase(state);
            const auto w = state.schedule.window_latents(ph.mode) * tpf;
            if (state.schedule.retain_context) {
                state.gen.cache.set_visible_tokens(w);
            } else {
                state.gen.cache.set_window_tokens(w);
            }
            state.chunks_left_in_phase = ph.generate_latents / kChunkLatents;
            if (ph.mode == ContextMode::LongContext && state.last_features)
                state.conditioning = fuse(nets.fusion, nets.text, Feature3D{*state.last_features, Extractor3D::kVersion});
        }
        if (!state.conditioning) state.conditioning = nets.text_only();

        ChunkReport cr;
        cr.index = state.gen.chunks_done;
        cr.mode = state.mode;
        const auto noise = ChunkNoise::draw(state.gen.rng, g);
        const Tensor chunk =
            denoise_chunk(nets.gen, noise, state.gen.cache, *state.conditioning, g.denoise_steps, {}, &cr.tokens_attended)
                .data;
        ++state.gen.chunks_done;
        --state.chunks_left_in_phase;

        const Tensor feats = nets.extractor.extract(VideoLatent(chunk)).data;
        if (!state.first_features) state.first_features = feats;
        cr.feature_drift = 1.0 - cosine_similarity(feats, *state.first_features).item();
        state.last_features = feats;
        for (std::size_t j = 0; j < kChunkLatents; ++j) state.pending.push_back({cr.index, time_slice(chunk, j, 1)});

        cr.live_tokens = state.gen.cache.stored_tokens();
        cr.cache_bytes = state.gen.cache.allocated_bytes();
        cr.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        rep.max_live_tokens = std::max(rep.max_live_tokens, cr.live_tokens);
        rep.chunks.push_back(cr);
        drain();
        if (hooks.on_chunk) hooks.on_chunk(cr, state);
    }
    rep.stopped = stop_requested();
    rep.total_latents = state.latents_emitted;
    rep.total_frames = state.frames_emitted();
    return rep;
}

/// Latent stream file: "EWLS", version u32, config hash u64, then one record per latent frame:
/// chunk index u64, dims u32 x 4 (c, h, w, 1), f64 payload.
class LatentStreamWriter {
public:
    static constexpr std::uint32_t kVersion = 1;

    LatentStreamWriter(const std::string& path, std::uint64_t config_hash, bool append = false) : path_(path) {
        if (append) {
            std::ifstream probe(path, std::ios::binary);
            if (!probe) throw FormatError("cannot append to missing stream file " + path);
            io::expect_magic(probe, "EWLS");
            if (io::read_u32(probe) != kVersion) throw FormatError("unsupported EWLS version");
            if (io::read_u64(probe) != config_hash) throw FormatError("stream file " + path + " has a different config hash");
            os_.open(path, std::ios::binary | std::ios::app);
        } else {
            os_.open(path, std::ios::binary | std::ios::trunc);
        }
        if (!os_) throw FormatError("cannot open " + path + " for writing");
        if (!append) {
            io::write_magic(os_, "EWLS");
            io::write_u32(os_, kVersion);
            io::write_u64(os_, config_hash);
        }
    }

    void write(std::uint64_t chunk, const Tensor& frame) {
        if (frame.rank() != 4) throw DimensionError("stream record needs a [c,h,w,1] frame");
        io::write_u64(os_, chunk);
        for (auto d : frame.shape()) io::write_u32(os_, static_cast<std::uint32_t>(d));
        io::write_f64s(os_, frame.data());
        ++records_;
    }

    void flush() { os_.flush(); }
    std::uint64_t records() const { return records_; }

private:
    std::string path_;
    std::ofstream os_;
    std::uint64_t records_ = 0;
};

struct LatentRecord {
    std::uint64_t chunk = 0;
    std::array<std::uint32_t, 4> dims{};
    std::vector<double> payload;

    friend bool operator==(const LatentRecord&, const LatentRecord&) = default;
};

struct LatentStreamFile {
    std::uint64_t config_hash = 0;
    std::vector<LatentRecord> records;
};

inline LatentStreamFile read_latent_stream(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    io::expect_magic(is, "EWLS");
    if (io::read_u32(is) != LatentStreamWriter::kVersion) throw FormatError("unsupported EWLS version");
    LatentStreamFile f;
    f.config_hash = io::read_u64(is);
    while (is.peek() != std::char_traits<char>::eof()) {
        LatentRecord r;
        r.chunk = io::read_u64(is);
        std::size_t n = 1;
        for (auto& d : r.dims) {
            d = io::read_u32(is);
            n *= d;
        }
        r.payload = io::read_f64s(is, n);
        f.records.push_back(std::move(r));
    }
    return f;
}

}  // namespace ew
