#pragma once

// Chunked few-step denoiser.
//
// A chunk of three latent frames is patchified into tokens and pushed through
// L pre-norm transformer layers whose attention reads the session KV cache.
// Sampling starts from pure noise at t = 1 and walks the K-point grid down;
// each step predicts the clean chunk as alpha_t * x_t + net(x_t) and re-noises
// to the next grid time. After the last step the clean chunk is passed once
// more (step row K) to produce the keys/values appended to the cache.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ew/binary_io.hpp"
#include "ew/diffusion.hpp"
#include "ew/errors.hpp"
#include "ew/fusion.hpp"
#include "ew/params.hpp"
#include "ew/rng.hpp"
#include "ew/rope_attention.hpp"
#include "ew/tensor.hpp"
#include "ew/video.hpp"

namespace ew {

struct GeneratorConfig {
    std::size_t channels = 4;
    std::size_t height = 8;
    std::size_t width = 8;
    std::size_t patch = 4;
    std::size_t model_dim = 32;
    std::size_t heads = 2;
    std::size_t layers = 2;
    std::size_t mlp_dim = 64;
    std::size_t denoise_steps = 4;  // K
    std::size_t text_dim = 16;
    double rope_base = 10000.0;
    bool zero_init_output = false;

    std::size_t tokens_per_frame() const { return (height / patch) * (width / patch); }
    std::size_t patch_dim() const { return channels * patch * patch; }
    std::size_t chunk_tokens() const { return kChunkLatents * tokens_per_frame(); }
    std::size_t frame_sites() const { return channels * height * width; }

    AttentionConfig attention() const {
        AttentionConfig a;
        a.n_heads = heads;
        a.model_dim = model_dim;
        a.rope_base = rope_base;
        return a;
    }

    /// Sink of `sink_latents` frames plus a window ring of `window_latents` frames.
    CacheConfig cache_config(std::size_t sink_latents, std::size_t window_latents) const {
        return {layers, model_dim, sink_latents * tokens_per_frame(), window_latents * tokens_per_frame(),
                tokens_per_frame()};
    }

    void validate() const {
        if (channels == 0 || patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0)
            throw ConfigError("generator: height/width must be positive multiples of patch");
        if (denoise_steps < 1) throw ConfigError("generator: denoise_steps must be >= 1");
        if (layers < 1 || mlp_dim < 1 || text_dim < 1) throw ConfigError("generator: layers/mlp_dim/text_dim must be >= 1");
        attention().validate();
    }

    friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

/// Noise consumed by one chunk: the starting sample and one re-noise draw per intermediate step.
struct ChunkNoise {
    Tensor initial;
    std::vector<Tensor> renoise;

    static ChunkNoise draw(Rng& rng, const GeneratorConfig& cfg) {
        const Shape s{cfg.channels, cfg.height, cfg.width, kChunkLatents};
        ChunkNoise n;
        n.initial = Tensor::randn(s, rng);
        for (std::size_t i = 0; i + 1 < cfg.denoise_steps; ++i) n.renoise.push_back(Tensor::randn(s, rng));
        return n;
    }
};

class GeneratorNet {
public:
    static constexpr std::uint32_t kVersion = 1;

    GeneratorNet(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        auto rng = Rng::derive(seed, 0x9e7, 0);
        const auto D = cfg.model_dim, P = cfg.patch_dim(), H = cfg.mlp_dim, E = cfg.text_dim;
        auto lin = [&](std::size_t in, std::size_t out) {
            return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)), true);
        };
        w_in_ = lin(P, D);
        b_in_ = Tensor::zeros({D}, true);
        tok_emb_ = Tensor::randn({cfg.tokens_per_frame(), D}, rng, 0.1, true);
        step_emb_ = Tensor::randn({cfg.denoise_steps + 1, D}, rng, 0.1, true);
        w_cond_ = lin(E, D);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            Layer L;
            L.ln1_g = Tensor::full({D}, 1.0, true);
            L.ln1_b = Tensor::zeros({D}, true);
            L.wq = lin(D, D);
            L.wk = lin(D, D);
            L.wv = lin(D, D);
            L.wo = lin(D, D);
            L.ln2_g = Tensor::full({D}, 1.0, true);
            L.ln2_b = Tensor::zeros({D}, true);
            L.w1 = lin(D, H);
            L.b1 = Tensor::zeros({H}, true);
            L.w2 = lin(H, D);
            L.b2 = Tensor::zeros({D}, true);
            layers_.push_back(std::move(L));
        }
        lno_g_ = Tensor::full({D}, 1.0, true);
        lno_b_ = Tensor::zeros({D}, true);
        if (cfg.zero_init_output) {
            w_out_ = Tensor::zeros({D, P}, true);
        } else {
            w_out_ = Tensor::randn({D, P}, rng, 0.5 / std::sqrt(static_cast<double>(D)), true);
        }
        b_out_ = Tensor::zeros({P}, true);
        build_index_maps();
    }

    const GeneratorConfig& config() const { return cfg_; }

    ParamList parameters() const {
        ParamList ps{{"gen.w_in", w_in_}, {"gen.b_in", b_in_}, {"gen.tok_emb", tok_emb_}, {"gen.step_emb", step_emb_},
                     {"gen.w_cond", w_cond_}};
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const auto p = "gen.l" + std::to_string(l) + ".";
            for (auto& [n, t] : std::vector<std::pair<const char*, Tensor>>{
                     {"ln1_g", L.ln1_g}, {"ln1_b", L.ln1_b}, {"wq", L.wq}, {"wk", L.wk}, {"wv", L.wv}, {"wo", L.wo},
                     {"ln2_g", L.ln2_g}, {"ln2_b", L.ln2_b}, {"w1", L.w1}, {"b1", L.b1}, {"w2", L.w2}, {"b2", L.b2}})
                ps.push_back({p + n, t});
        }
        ps.push_back({"gen.lno_g", lno_g_});
        ps.push_back({"gen.lno_b", lno_b_});
        ps.push_back({"gen.w_out", w_out_});
        ps.push_back({"gen.b_out", b_out_});
        return ps;
    }

    /// Pooled conditioning vector [1 x D] from a fused embedding.
    Tensor condition(const FusedEmbedding& cond) const {
        if (cond.tokens.rank() != 2 || cond.tokens.dim(1) != cfg_.text_dim)
            throw ConfigError("generator: conditioning width " + shape_str(cond.tokens.shape()) +
                              " does not match text_dim " + std::to_string(cfg_.text_dim));
        return matmul(reshape(mean_axis(cond.tokens, 0), {1, cfg_.text_dim}), w_cond_);
    }

    /// One network evaluation on a chunk latent [c,h,w,3]. With commit=true the chunk's
    /// keys/values are appended to the cache and no output is produced.
    Tensor pass(const Tensor& x, std::size_t step_row, const Tensor& cond_row, KVCache& cache, bool commit,
                std::size_t* tokens_attended = nullptr) const {
        check_cache(cache);
        const auto T = cfg_.chunk_tokens(), D = cfg_.model_dim;
        if (x.shape() != Shape{cfg_.channels, cfg_.height, cfg_.width, kChunkLatents})
            throw DimensionError("generator: chunk latent has shape " + shape_str(x.shape()));
        const auto attn = cfg_.attention();
        Tensor h = add_bias(matmul(gather(x, patchify_, {T, cfg_.patch_dim()}), w_in_), b_in_);
        h = add(h, gather(tok_emb_, tile_, {T, D}));
        h = add_bias(h, rows(step_emb_, step_row, 1));
        h = add_bias(h, cond_row);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const Tensor a = layer_norm(h, L.ln1_g, L.ln1_b);
            QueryBlock qb{matmul(a, L.wq), matmul(a, L.wk), matmul(a, L.wv)};
            const auto res = attend_detailed(qb, cache.layer(l), attn);
            if (tokens_attended && l == 0) *tokens_attended = res.tokens_attended;
            if (commit) append_block(cache.layer(l), qb.k, qb.v);
            h = add(h, matmul(res.output, L.wo));
            if (commit && l + 1 == layers_.size()) return Tensor();
            const Tensor m = layer_norm(h, L.ln2_g, L.ln2_b);
            h = add(h, add_bias(matmul(silu(add_bias(matmul(m, L.w1), L.b1)), L.w2), L.b2));
        }
        const Tensor out = add_bias(matmul(layer_norm(h, lno_g_, lno_b_), w_out_), b_out_);
        return gather(out, unpatchify_, {cfg_.channels, cfg_.height, cfg_.width, kChunkLatents});
    }

    /// Appends a finished chunk to the cache (the clean-context pass).
    void commit(const Tensor& chunk, const Tensor& cond_row, KVCache& cache) const {
        pass(chunk, cfg_.denoise_steps, cond_row, cache, true);
    }

    /// EWNT: magic, version u32, config hash u64, config u32 x 11, rope base f64, params.
    void save(const std::string& path, std::uint64_t config_hash) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("cannot open " + path + " for writing");
        io::write_magic(os, "EWNT");
        io::write_u32(os, kVersion);
        io::write_u64(os, config_hash);
        for (auto v : {cfg_.channels, cfg_.height, cfg_.width, cfg_.patch, cfg_.model_dim, cfg_.heads, cfg_.layers,
                       cfg_.mlp_dim, cfg_.denoise_steps, cfg_.text_dim, std::size_t{cfg_.zero_init_output}})
            io::write_u32(os, static_cast<std::uint32_t>(v));
        io::write_pod(os, cfg_.rope_base);
        write_params(os, parameters());
    }

    static GeneratorNet load(const std::string& path, std::uint64_t* config_hash = nullptr) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open " + path);
        io::expect_magic(is, "EWNT");
        if (io::read_u32(is) != kVersion) throw FormatError("unsupported EWNT version");
        const auto h = io::read_u64(is);
        if (config_hash) *config_hash = h;
        GeneratorConfig c;
        for (auto* f : {&c.channels, &c.height, &c.width, &c.patch, &c.model_dim, &c.heads, &c.layers, &c.mlp_dim,
                        &c.denoise_steps, &c.text_dim})
            *f = io::read_u32(is);
        c.zero_init_output = io::read_u32(is) != 0;
        c.rope_base = io::read_pod<double>(is);
        GeneratorNet net(c, 0);
        auto ps = net.parameters();
        read_params_into(is, ps);
        return net;
    }

private:
    struct Layer {
        Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    void check_cache(const KVCache& cache) const {
        const auto& c = cache.config();
        if (c.layers != cfg_.layers || c.model_dim != cfg_.model_dim || c.frame_tokens != cfg_.tokens_per_frame())
            throw ConfigError("generator/cache mismatch: cache has " + std::to_string(c.layers) + " layers, dim " +
                              std::to_string(c.model_dim) + ", " + std::to_string(c.frame_tokens) +
                              " tokens per frame");
    }

    // The first latent frame ever committed fills the sink; everything else goes to the window.
    static void append_block(KVLayerCache& layer, const Tensor& k, const Tensor& v) {
        std::size_t n_sink = 0;
        if (!layer.sealed()) n_sink = std::min(layer.config().sink_tokens - layer.sink_count(), k.dim(0));
        if (n_sink) layer.append(rows(k, 0, n_sink), rows(v, 0, n_sink), true);
        if (n_sink < k.dim(0))
            layer.append(rows(k, n_sink, k.dim(0) - n_sink), rows(v, n_sink, v.dim(0) - n_sink), false);
    }

    void build_index_maps() {
        const auto C = cfg_.channels, H = cfg_.height, W = cfg_.width, p = cfg_.patch, F = kChunkLatents;
        const auto nx = W / p, tpf = cfg_.tokens_per_frame(), P = cfg_.patch_dim();
        auto fwd = std::make_shared<std::vector<std::size_t>>(F * tpf * P);
        auto inv = std::make_shared<std::vector<std::size_t>>(F * tpf * P);
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t tok = 0; tok < tpf; ++tok)
                for (std::size_t ci = 0; ci < C; ++ci)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx) {
                            const std::size_t y = (tok / nx) * p + dy, xx = (tok % nx) * p + dx;
                            const std::size_t src = ((ci * H + y) * W + xx) * F + f;
                            const std::size_t dst = (f * tpf + tok) * P + (ci * p + dy) * p + dx;
                            (*fwd)[dst] = src;
                            (*inv)[src] = dst;
                        }
        patchify_ = fwd;
        unpatchify_ = inv;
        auto tile = std::make_shared<std::vector<std::size_t>>(F * tpf * cfg_.model_dim);
        for (std::size_t i = 0; i < tile->size(); ++i) (*tile)[i] = i % (tpf * cfg_.model_dim);
        tile_ = tile;
    }

    GeneratorConfig cfg_;
    Tensor w_in_, b_in_, tok_emb_, step_emb_, w_cond_;
    std::vector<Layer> layers_;
    Tensor lno_g_, lno_b_, w_out_, b_out_;
    std::shared_ptr<const std::vector<std::size_t>> patchify_, unpatchify_, tile_;
};

struct DenoiseOptions {
    /// Cut the gradient path from this chunk into everything conditioned on it.
    bool detach_before_cache = false;
};

/// Denoises one chunk from `noise`, then appends its clean keys/values to the cache.
inline LatentChunk denoise_chunk(const GeneratorNet& net, const ChunkNoise& noise, KVCache& cache,
                                 const FusedEmbedding& cond, std::size_t steps, const DenoiseOptions& opt = {},
                                 std::size_t* tokens_attended = nullptr) {
    const auto& cfg = net.config();
    if (steps != cfg.denoise_steps)
        throw ConfigError("denoise_chunk: net was built for " + std::to_string(cfg.denoise_steps) + " steps, not " +
                          std::to_string(steps));
    if (noise.renoise.size() + 1 != steps) throw ConfigError("denoise_chunk: noise does not match step count");
    const DiffusionSchedule sched(steps + 1);
    const Tensor cond_row = net.condition(cond);
    Tensor x = noise.initial;
    Tensor pred;
    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t ti = steps - s;
        pred = add(scale(x, sched.alpha(ti)), net.pass(x, s, cond_row, cache, false, tokens_attended));
        if (s + 1 < steps) x = forward_diffuse(pred, ti - 1, noise.renoise[s], sched);
    }
    net.commit(opt.detach_before_cache ? detach(pred) : pred, cond_row, cache);
    return LatentChunk(pred);
}

/// Cache, noise source and chunk counter of one generation session.
struct GenerationState {
    KVCache cache;
    Rng rng;
    std::uint64_t chunks_done = 0;

    GenerationState() = default;
    GenerationState(const CacheConfig& cc, std::uint64_t seed) : cache(cc), rng(Rng::derive(seed, 0x5a7e, 0)) {}

    void write(std::ostream& os) const {
        io::write_string(os, rng.serialize());
        io::write_u64(os, chunks_done);
        cache.write(os);
    }

    static GenerationState read(std::istream& is) {
        GenerationState s;
        s.rng.deserialize(io::read_string(is));
        s.chunks_done = io::read_u64(is);
        s.cache = KVCache::read(is);
        return s;
    }
};

enum class RolloutMode { Train, Inference };

struct RolloutOptions {
    RolloutMode mode = RolloutMode::Inference;
    /// Leading chunks of this call that are conditioning context (detached before caching in train mode).
    std::size_t context_chunks = 0;
};

struct RolloutResult {
    std::vector<Tensor> chunks;           // [c,h,w,3] each
    std::vector<std::uint64_t> hashes;    // value fingerprint taken when each chunk was produced

    VideoLatent latent() const {
        if (chunks.empty()) return VideoLatent();
        return VideoLatent(concat_time(chunks));
    }
};

using ConditionFn = std::function<FusedEmbedding(std::size_t chunk_index)>;

/// Sequential chunk generation; chunk k is conditioned on every chunk before it through the cache.
inline RolloutResult rollout(const GeneratorNet& net, std::size_t n_chunks, const ConditionFn& cond,
                             GenerationState& state, const RolloutOptions& opt = {}) {
    std::unique_ptr<NoGradGuard> guard;
    if (opt.mode == RolloutMode::Inference) guard = std::make_unique<NoGradGuard>();
    RolloutResult res;
    for (std::size_t k = 0; k < n_chunks; ++k) {
        const auto noise = ChunkNoise::draw(state.rng, net.config());
        DenoiseOptions dopt;
        dopt.detach_before_cache = opt.mode == RolloutMode::Train && k < opt.context_chunks;
        auto chunk = denoise_chunk(net, noise, state.cache, cond(k), net.config().denoise_steps, dopt);
        res.hashes.push_back(io::fnv1a(chunk.data.data()));
        res.chunks.push_back(chunk.data);
        ++state.chunks_done;
    }
    return res;
}

inline RolloutResult rollout(const GeneratorNet& net, std::size_t n_chunks, const FusedEmbedding& cond,
                             GenerationState& state, const RolloutOptions& opt = {}) {
    return rollout(net, n_chunks, [&](std::size_t) { return cond; }, state, opt);
}

}  // namespace ew
