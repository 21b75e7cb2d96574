#pragma once

// Conditional autoregressive training.
//
// A training sequence is 81 frames = 21 latents = 7 chunks. A random mask start
// splits it into a conditioning prefix and a masked suffix. The generator rolls
// out the prefix from noise, then continues into the suffix with conditioning
// fused from the last prefix chunk. The generated sequence is scored with DMD
// against the analytic law of the supervision process; optionally the suffix is
// regenerated from the prefix context and compared in 3D-feature space.
//
// detach_conditioning=true cuts every path from the loss back into the prefix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ew/diffusion.hpp"
#include "ew/errors.hpp"
#include "ew/fusion.hpp"
#include "ew/generator.hpp"
#include "ew/losses.hpp"
#include "ew/optim.hpp"
#include "ew/params.hpp"
#include "ew/rng.hpp"
#include "ew/tensor.hpp"
#include "ew/video.hpp"

namespace ew {

inline constexpr std::size_t kTrainFrames = 81;

/// Latent (0-based) holding 1-based frame t: frame 1 is latent 0, frames 4j-2..4j+1 are latent j.
inline std::size_t latent_of_frame(std::size_t t) {
    if (t == 0) throw DomainError("frames are numbered from 1");
    return (t + 2) / 4;
}

struct MaskingPlan {
    std::size_t T_frames = kTrainFrames;
    std::size_t t = 3;  // first masked frame, 1-based

    std::size_t latents() const { return (T_frames - 1) / 4 + 1; }
    std::size_t chunks() const { return latents() / kChunkLatents; }

    /// First masked chunk. The mask is widened down to a chunk boundary and at least
    /// one chunk stays unmasked so the suffix always has context.
    std::size_t boundary_chunk() const { return std::max<std::size_t>(1, latent_of_frame(t) / kChunkLatents); }
    std::size_t masked_chunks() const { return chunks() - boundary_chunk(); }

    /// Masked latent indices (chunk aligned).
    std::vector<std::size_t> masked_latents() const {
        std::vector<std::size_t> out;
        for (std::size_t j = boundary_chunk() * kChunkLatents; j < latents(); ++j) out.push_back(j);
        return out;
    }

    void validate() const {
        if (t < 3 || t >= T_frames || t % 3 != 0)
            throw DomainError("mask start " + std::to_string(t) + " must be a multiple of 3 in [3, " +
                              std::to_string(T_frames) + ")");
    }

    friend bool operator==(const MaskingPlan&, const MaskingPlan&) = default;
};

/// t uniform over {3, 6, ..., 78}.
inline MaskingPlan sample_masking_plan(Rng& rng) {
    MaskingPlan p;
    const std::size_t choices = (kTrainFrames - 1) / 3;  // 26
    p.t = 3 * (1 + static_cast<std::size_t>(rng.below(choices)));
    return p;
}

/// Linear-Gaussian latent process v_{j+1} = A v_j + sqrt(1 - A^2) e_j with A diagonal per channel.
/// Every site is a stationary unit-variance AR(1) sequence.
struct SupervisionProcess {
    std::vector<double> coeffs;  // one per latent channel, |a| < 1

    static SupervisionProcess for_channels(std::size_t channels) {
        SupervisionProcess p;
        if (channels == 4) {
            p.coeffs = {0.5, 0.7, 0.8, 0.9};
        } else {
            for (std::size_t c = 0; c < channels; ++c)
                p.coeffs.push_back(channels == 1 ? 0.8 : 0.5 + 0.4 * static_cast<double>(c) / (channels - 1.0));
        }
        return p;
    }

    double spectral_radius() const {
        double r = 0.0;
        for (double a : coeffs) r = std::max(r, std::abs(a));
        return r;
    }

    /// One sample [c,h,w,n].
    Tensor sample(Rng& rng, std::size_t h, std::size_t w, std::size_t n) const {
        const std::size_t c = coeffs.size();
        std::vector<double> v(c * h * w * n);
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double a = coeffs[ci], s = std::sqrt(1.0 - a * a);
            for (std::size_t site = 0; site < h * w; ++site) {
                double* row = v.data() + (ci * h * w + site) * n;
                row[0] = rng.normal();
                for (std::size_t j = 1; j < n; ++j) row[j] = a * row[j - 1] + s * rng.normal();
            }
        }
        return Tensor::from({c, h, w, n}, std::move(v));
    }

    /// E[v_{j+m} | v_j] = A^m v_j.
    double conditional_mean(std::size_t channel, double v, std::size_t m) const {
        return std::pow(coeffs.at(channel), static_cast<double>(m)) * v;
    }

    /// Exact law of an n-latent sequence, one group per channel.
    GaussianSequenceScore score_model(std::size_t n) const { return GaussianSequenceScore::ar1(n, coeffs); }
};

struct TrainConfig {
    std::string optimizer = "adam";  // only Adam is implemented
    double lr = 1e-3;
    std::size_t steps = 200;
    std::size_t batch_size = 1;
    double lambda_3d = 0.1;
    bool enable_l3d = true;
    bool detach_conditioning = true;
    std::uint64_t seed = 0;
    std::size_t dmd_schedule_points = 9;
    double fake_score_ridge = 1e-4;

    void validate() const {
        if (optimizer != "adam") throw ConfigError("unsupported optimizer '" + optimizer + "' (only 'adam')");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (dmd_schedule_points < 3) throw ConfigError("dmd_schedule_points must be >= 3");
        LossWeights{lambda_3d}.validate();
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct ModelConfig {
    GeneratorConfig generator;
    std::size_t text_tokens = 4;
    std::size_t feature_channels = 8;
    std::uint64_t text_seed = 11;

    FusionConfig fusion() const {
        return {text_tokens, generator.text_dim, feature_channels, frames_for_latents(kChunkLatents)};
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Everything a rollout or a training step needs.
struct Nets {
    GeneratorNet gen;
    FusionNet fusion;
    Extractor3D extractor;
    TextEmbedding text;

    Nets(const ModelConfig& mc, std::uint64_t seed)
        : gen(mc.generator, seed),
          fusion(mc.fusion(), seed),
          extractor(mc.generator.channels, mc.feature_channels),
          text(make_text_embedding(mc.text_tokens, mc.generator.text_dim, mc.text_seed)) {}

    Nets(GeneratorNet g, FusionNet f, const ModelConfig& mc)
        : gen(std::move(g)),
          fusion(std::move(f)),
          extractor(mc.generator.channels, mc.feature_channels),
          text(make_text_embedding(mc.text_tokens, mc.generator.text_dim, mc.text_seed)) {}

    /// Conditioning from the features of one finished chunk.
    FusedEmbedding fused_from(const Tensor& chunk) const {
        return fuse(fusion, text, extractor.extract(VideoLatent(chunk)));
    }

    FusedEmbedding text_only() const { return fuse_optional(fusion, text, std::nullopt); }
};

/// Conditioning for chunk k given the chunks generated so far in this pass.
using ContextCondFn = std::function<FusedEmbedding(std::size_t k, const std::vector<Tensor>& so_far)>;

struct TwoStepGenRecord {
    std::vector<Tensor> full;           // v: every chunk of the from-noise generation
    std::vector<std::size_t> masked;    // masked latent indices
    std::vector<Tensor> regenerated;    // v-hat: masked chunks re-predicted from the unmasked context
    std::size_t boundary_chunk = 0;
};

struct TwoStepOptions {
    bool detach_context = true;  // detach prefix chunks before they enter the cache
    bool regenerate = true;      // skip step (2) when false
};

/// Validates a masked latent set and returns the first masked chunk.
inline std::size_t mask_boundary(const std::vector<std::size_t>& masked, std::size_t n_chunks) {
    const std::size_t n = n_chunks * kChunkLatents;
    if (masked.empty()) return n_chunks;
    auto sorted = masked;
    std::sort(sorted.begin(), sorted.end());
    if (sorted.back() >= n) throw AlignmentError("masked latent " + std::to_string(sorted.back()) + " out of range");
    if (sorted.front() % kChunkLatents != 0)
        throw AlignmentError("mask starts at latent " + std::to_string(sorted.front()) + ", not a chunk boundary");
    for (std::size_t i = 0; i < sorted.size(); ++i)
        if (sorted[i] != sorted.front() + i)
            throw AlignmentError("mask must be a contiguous chunk-aligned suffix");
    if (sorted.back() + 1 != n) throw AlignmentError("mask must extend to the end of the sequence");
    return sorted.front() / kChunkLatents;
}

/// (1) generates every chunk from noise; (2) re-predicts the masked chunks from the
/// cache state right before the first masked chunk, with the regeneration noise.
inline TwoStepGenRecord two_step_generate(const GeneratorNet& gen, const CacheConfig& cache_cfg, std::size_t n_chunks,
                                          const std::vector<std::size_t>& masked_latents,
                                          const std::vector<ChunkNoise>& full_noise,
                                          const std::vector<ChunkNoise>& regen_noise, const ContextCondFn& cond,
                                          const TwoStepOptions& opt = {}) {
    TwoStepGenRecord rec;
    rec.masked = masked_latents;
    rec.boundary_chunk = mask_boundary(masked_latents, n_chunks);
    if (full_noise.size() != n_chunks) throw ConfigError("two_step_generate: need one noise draw per chunk");
    const auto steps = gen.config().denoise_steps;
    KVCache cache(cache_cfg);
    std::optional<KVCache> at_boundary;
    for (std::size_t k = 0; k < n_chunks; ++k) {
        if (k == rec.boundary_chunk) at_boundary = cache;
        DenoiseOptions d;
        d.detach_before_cache = opt.detach_context && k < rec.boundary_chunk;
        rec.full.push_back(denoise_chunk(gen, full_noise[k], cache, cond(k, rec.full), steps, d).data);
    }
    if (!opt.regenerate || !at_boundary) return rec;
    if (regen_noise.size() != n_chunks - rec.boundary_chunk)
        throw ConfigError("two_step_generate: need one regeneration noise draw per masked chunk");
    std::vector<Tensor> context(rec.full.begin(), rec.full.begin() + static_cast<std::ptrdiff_t>(rec.boundary_chunk));
    for (std::size_t k = rec.boundary_chunk; k < n_chunks; ++k) {
        auto c = denoise_chunk(gen, regen_noise[k - rec.boundary_chunk], *at_boundary, cond(k, context), steps);
        context.push_back(c.data);
        rec.regenerated.push_back(c.data);
    }
    return rec;
}

/// One training step's inputs: a masking plan per batch element plus the step index that keys all noise.
struct TrainBatch {
    std::uint64_t step = 0;
    std::vector<MaskingPlan> plans;
};

// Independent random streams, so e.g. toggling the 3D term never shifts the DMD noise.
enum : std::uint64_t { kStreamPlan = 0x91a7, kStreamRollout = 0x2011, kStreamRegen = 0x2e6e, kStreamDmd = 0xd3d0 };

inline TrainBatch sample_batch(const TrainConfig& cfg, std::uint64_t step) {
    TrainBatch b;
    b.step = step;
    auto rng = Rng::derive(cfg.seed, kStreamPlan, step);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) b.plans.push_back(sample_masking_plan(rng));
    return b;
}

struct StepReport {
    std::uint64_t step = 0;
    std::size_t mask_t = 0;
    std::size_t boundary_chunk = 0;
    double loss_gen = 0.0;
    double loss_3d = 0.0;
    double loss_total = 0.0;
    double grad_prefix = 0.0;     // d loss / d conditioning-prefix latents
    double grad_suffix = 0.0;     // d loss / d generated-suffix latents
    double grad_fusion = 0.0;
    double grad_generator = 0.0;

    friend bool operator==(const StepReport&, const StepReport&) = default;
};

class Trainer {
public:
    Trainer(const TrainConfig& cfg, const ModelConfig& mc, std::uint64_t init_seed)
        : Trainer(cfg, mc, Nets(mc, init_seed)) {}

    Trainer(const TrainConfig& cfg, const ModelConfig& mc, Nets nets)
        : cfg_(cfg),
          mc_(mc),
          nets_(std::move(nets)),
          process_(SupervisionProcess::for_channels(mc.generator.channels)),
          sched_(cfg.dmd_schedule_points),
          opt_(all_params(), {cfg.lr, 0.9, 0.999, 1e-8}) {
        cfg.validate();
        plan_ = MaskingPlan{};
        scores_.real = process_.score_model(plan_.latents());
    }

    const TrainConfig& config() const { return cfg_; }
    const ModelConfig& model_config() const { return mc_; }
    const Nets& nets() const { return nets_; }
    Nets& nets() { return nets_; }
    const SupervisionProcess& process() const { return process_; }
    std::uint64_t steps_done() const { return step_; }

    /// Cache used during training: first latent in the sink, the rest of the sequence in the window.
    CacheConfig train_cache() const { return mc_.generator.cache_config(1, plan_.latents() - 1); }

    StepReport step() { return step(sample_batch(cfg_, step_)); }

    StepReport step(const TrainBatch& batch) {
        if (batch.plans.empty()) throw ConfigError("train step needs a non-empty batch");
        const auto& gcfg = mc_.generator;
        const std::size_t n_chunks = plan_.chunks();
        const bool detach_ctx = cfg_.detach_conditioning;

        std::vector<TwoStepGenRecord> recs;
        std::vector<std::vector<Tensor>> seqs;  // per element, chunks as they enter the loss
        for (std::size_t b = 0; b < batch.plans.size(); ++b) {
            const auto& plan = batch.plans[b];
            plan.validate();
            const std::uint64_t key = batch.step * 1024 + b;
            auto noise_rng = Rng::derive(cfg_.seed, kStreamRollout, key);
            auto regen_rng = Rng::derive(cfg_.seed, kStreamRegen, key);
            std::vector<ChunkNoise> full, regen;
            for (std::size_t k = 0; k < n_chunks; ++k) full.push_back(ChunkNoise::draw(noise_rng, gcfg));
            const std::size_t bc = plan.boundary_chunk();
            for (std::size_t k = bc; k < n_chunks; ++k) regen.push_back(ChunkNoise::draw(regen_rng, gcfg));

            std::optional<FusedEmbedding> fused;
            ContextCondFn cond = [&](std::size_t k, const std::vector<Tensor>& so_far) {
                if (k < bc) return nets_.text_only();
                if (!fused) {
                    const Tensor& last = so_far.at(bc - 1);
                    fused = nets_.fused_from(detach_ctx ? detach(last) : last);
                }
                return *fused;
            };
            TwoStepOptions topt;
            topt.detach_context = detach_ctx;
            topt.regenerate = cfg_.enable_l3d;
            recs.push_back(two_step_generate(nets_.gen, train_cache(), n_chunks, plan.masked_latents(), full, regen,
                                             cond, topt));
            std::vector<Tensor> seq;
            for (std::size_t k = 0; k < n_chunks; ++k)
                seq.push_back(k < bc && detach_ctx ? detach(recs.back().full[k]) : recs.back().full[k]);
            seqs.push_back(std::move(seq));
        }

        // DMD against the exact law of the supervision process; the fake score is refit to this step's outputs.
        std::vector<Tensor> xs;
        std::vector<std::vector<double>> sample_values;
        for (const auto& s : seqs) {
            xs.push_back(concat_time(s));
            sample_values.push_back(xs.back().values());
        }
        std::vector<std::span<const double>> spans(sample_values.begin(), sample_values.end());
        scores_.refit(spans, plan_.latents(), gcfg.channels, step_, cfg_.fake_score_ridge);
        auto dmd_rng = Rng::derive(cfg_.seed, kStreamDmd, batch.step);

        const double inv_b = 1.0 / static_cast<double>(batch.plans.size());
        Tensor gen_loss = Tensor::scalar(0.0);
        Tensor l3d = Tensor::scalar(0.0);
        std::vector<Tensor> dmd_grads;
        for (std::size_t b = 0; b < xs.size(); ++b) {
            const std::size_t ti = 1 + dmd_rng.below(sched_.size() - 2);
            const Tensor noise = Tensor::randn(xs[b].shape(), dmd_rng);
            dmd_grads.push_back(dmd_generator_grad(xs[b], scores_, ti, noise, sched_, step_));
            gen_loss = add(gen_loss, scale(dmd_surrogate_loss(xs[b], dmd_grads.back()), inv_b));
            if (cfg_.enable_l3d && !recs[b].regenerated.empty()) {
                const std::size_t bc = recs[b].boundary_chunk;
                const std::vector<Tensor> v(recs[b].full.begin() + static_cast<std::ptrdiff_t>(bc), recs[b].full.end());
                const auto f = nets_.extractor.extract(VideoLatent(concat_time(v)));
                const auto f_hat = nets_.extractor.extract(VideoLatent(concat_time(recs[b].regenerated)));
                l3d = add(l3d, scale(loss_3d(f_hat, f), inv_b));
            }
        }
        const Tensor total = total_loss(gen_loss, l3d, LossWeights{cfg_.lambda_3d});
        if (!std::isfinite(total.item()) || !std::isfinite(l3d.item())) {
            std::string dump = "non-finite training loss at step " + std::to_string(step_) +
                               ": gen=" + std::to_string(gen_loss.item()) + " l3d=" + std::to_string(l3d.item());
            for (std::size_t b = 0; b < xs.size(); ++b)
                dump += "\n  generated[" + std::to_string(b) + "] " + tensor_stats(xs[b]) + "\n  dmd_grad[" +
                        std::to_string(b) + "] " + tensor_stats(dmd_grads[b]);
            throw NumericError(dump);
        }

        opt_.zero_grad();
        backward(total);

        StepReport r;
        r.step = step_;
        r.mask_t = batch.plans.front().t;
        r.boundary_chunk = batch.plans.front().boundary_chunk();
        r.loss_gen = gen_loss.item();
        r.loss_3d = l3d.item();
        r.loss_total = total.item();
        double pre = 0.0, suf = 0.0;
        for (std::size_t b = 0; b < recs.size(); ++b)
            for (std::size_t k = 0; k < n_chunks; ++k) {
                const double g = recs[b].full[k].grad_norm();
                (k < recs[b].boundary_chunk ? pre : suf) += g * g;
            }
        r.grad_prefix = std::sqrt(pre);
        r.grad_suffix = std::sqrt(suf);
        r.grad_fusion = grad_norm(nets_.fusion.parameters());
        r.grad_generator = grad_norm(nets_.gen.parameters());
        opt_.step();
        ++step_;
        return r;
    }

private:
    std::vector<Tensor> all_params() const {
        auto ps = tensors_of(nets_.gen.parameters());
        for (auto& t : tensors_of(nets_.fusion.parameters())) ps.push_back(t);
        return ps;
    }

    TrainConfig cfg_;
    ModelConfig mc_;
    Nets nets_;
    SupervisionProcess process_;
    DiffusionSchedule sched_;
    Adam opt_;
    MaskingPlan plan_;
    ScorePair scores_;
    std::uint64_t step_ = 0;
};

inline StepReport train_step(Trainer& trainer, const TrainBatch& batch) { return trainer.step(batch); }

/// Runs cfg.steps steps, calling `on_step` after each.
inline std::vector<StepReport> train(Trainer& trainer, const std::function<void(const StepReport&)>& on_step = {}) {
    std::vector<StepReport> out;
    for (std::size_t i = 0; i < trainer.config().steps; ++i) {
        out.push_back(trainer.step());
        if (on_step) on_step(out.back());
    }
    return out;
}

struct DriftReport {
    std::size_t chunks = 0;
    std::vector<double> divergence_detached;
    std::vector<double> divergence_baseline;
    std::vector<double> prefix_grad_detached;
    std::vector<double> prefix_grad_baseline;
};

/// Continuation drift of a trained generator: chunk 0 is a shared sample of the supervision
/// process; chunks 1.. are generated. For chunk k >= 1 the divergence is the mean squared
/// deviation of its latents from E[v_j | v_{3k-1}] under the process. Chunk 0 scores the
/// shared sample against the unconditional mean (0).
inline std::vector<double> continuation_divergence(const Nets& nets, const SupervisionProcess& proc,
                                                   std::size_t n_chunks, std::uint64_t seed,
                                                   std::size_t window_latents = 17) {
    NoGradGuard ng;
    const auto& g = nets.gen.config();
    auto data_rng = Rng::derive(seed, 0xda7a, 0);
    const Tensor first = proc.sample(data_rng, g.height, g.width, kChunkLatents);
    KVCache cache(g.cache_config(1, window_latents));
    std::vector<double> out;
    const std::size_t sites = g.height * g.width;
    auto mean_sq = [&](const Tensor& chunk, const Tensor* prev) {
        double s = 0.0;
        for (std::size_t c = 0; c < g.channels; ++c)
            for (std::size_t site = 0; site < sites; ++site) {
                const std::size_t base = (c * sites + site) * kChunkLatents;
                for (std::size_t j = 0; j < kChunkLatents; ++j) {
                    const double ref = prev ? proc.conditional_mean(c, (*prev)[base + kChunkLatents - 1], j + 1) : 0.0;
                    const double d = chunk[base + j] - ref;
                    s += d * d;
                }
            }
        return s / static_cast<double>(chunk.numel());
    };
    out.push_back(mean_sq(first, nullptr));
    const FusedEmbedding text = nets.text_only();
    nets.gen.commit(first, nets.gen.condition(text), cache);
    auto rng = Rng::derive(seed, kStreamRollout, 0xd71f7);
    Tensor prev = first;
    for (std::size_t k = 1; k < n_chunks; ++k) {
        const auto cond = nets.fused_from(prev);
        const auto noise = ChunkNoise::draw(rng, g);
        const Tensor chunk = denoise_chunk(nets.gen, noise, cache, cond, g.denoise_steps).data;
        out.push_back(mean_sq(chunk, &prev));
        prev = chunk;
    }
    return out;
}

/// Trains the detached and the baseline configuration from identical initial weights and
/// measures continuation drift for both over `chunks` chunks.
inline DriftReport drift_experiment(const TrainConfig& detached, const TrainConfig& baseline, const ModelConfig& mc,
                                    std::uint64_t init_seed, std::size_t chunks = 32,
                                    const std::function<void(bool, const StepReport&)>& on_step = {}) {
    auto same = detached;
    same.detach_conditioning = baseline.detach_conditioning;
    if (!(same == baseline) || detached.detach_conditioning == baseline.detach_conditioning)
        throw ConfigError("drift experiment needs two configs that differ only in detach_conditioning");
    DriftReport rep;
    rep.chunks = chunks;
    for (const auto* cfg : {&detached, &baseline}) {
        Trainer tr(*cfg, mc, init_seed);
        auto& grads = cfg->detach_conditioning ? rep.prefix_grad_detached : rep.prefix_grad_baseline;
        train(tr, [&](const StepReport& r) {
            grads.push_back(r.grad_prefix);
            if (on_step) on_step(cfg->detach_conditioning, r);
        });
        auto div = continuation_divergence(tr.nets(), tr.process(), chunks, cfg->seed);
        (cfg->detach_conditioning ? rep.divergence_detached : rep.divergence_baseline) = std::move(div);
    }
    return rep;
}

}  // namespace ew
