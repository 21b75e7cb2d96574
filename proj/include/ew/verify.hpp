#pragma once

// Property suites run by `ew verify <suite>` and by the acceptance binary.
// Every check compares against an independent oracle: central differences,
// a from-scratch attention reference, closed-form Gaussian quantities, or a
// second uninterrupted run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ew/diffusion.hpp"
#include "ew/fusion.hpp"
#include "ew/generator.hpp"
#include "ew/gradcheck.hpp"
#include "ew/losses.hpp"
#include "ew/optim.hpp"
#include "ew/rope_attention.hpp"
#include "ew/streamer.hpp"
#include "ew/tensor.hpp"
#include "ew/trainer.hpp"
#include "ew/video.hpp"

namespace ew {

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

using SuiteResult = std::vector<Check>;

inline bool all_passed(const SuiteResult& r) {
    return std::all_of(r.begin(), r.end(), [](const Check& c) { return c.passed; });
}

namespace verify_detail {

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline std::string sci(double v) { return fmt("%.3e", v); }

inline Check grad_check(const std::string& name, const GradCheckResult& r, double tol) {
    return {name, r.rel_error < tol && std::isfinite(r.rel_error),
            "rel " + sci(r.rel_error) + " (tol " + sci(tol) + ", |g| " + sci(r.analytic_norm) + ")"};
}

inline Tensor leaf(Shape s, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(s), rng, scale, true);
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class F>
bool throws_as(F&& f, const std::function<bool(const std::exception&)>& pred) {
    try {
        f();
    } catch (const std::exception& e) {
        return pred(e);
    }
    return false;
}

/// Plain-loop causal attention over a whole sequence with absolute positions 0..N-1.
/// Shares no code with attend(): its own rotation, scores, softmax and mixing.
inline std::vector<double> reference_attention(const std::vector<double>& q, const std::vector<double>& k,
                                               const std::vector<double>& v, std::size_t N, std::size_t heads,
                                               std::size_t hd, double base, std::size_t q_begin = 0) {
    const std::size_t D = heads * hd;
    auto rotate = [&](const std::vector<double>& x) {
        std::vector<double> out(x.size());
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t j = 0; j < hd / 2; ++j) {
                    const double ang = static_cast<double>(t) * std::pow(base, -2.0 * j / static_cast<double>(hd));
                    const double a = x[t * D + h * hd + 2 * j], b = x[t * D + h * hd + 2 * j + 1];
                    out[t * D + h * hd + 2 * j] = a * std::cos(ang) - b * std::sin(ang);
                    out[t * D + h * hd + 2 * j + 1] = a * std::sin(ang) + b * std::cos(ang);
                }
        return out;
    };
    const auto qr = rotate(q), kr = rotate(k);
    std::vector<double> out((N - q_begin) * D, 0.0);
    for (std::size_t i = q_begin; i < N; ++i)
        for (std::size_t h = 0; h < heads; ++h) {
            std::vector<double> s(i + 1);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                double d = 0.0;
                for (std::size_t c = 0; c < hd; ++c) d += qr[i * D + h * hd + c] * kr[j * D + h * hd + c];
                s[j] = d / std::sqrt(static_cast<double>(hd));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (auto& x : s) z += (x = std::exp(x - mx));
            for (std::size_t j = 0; j <= i; ++j)
                for (std::size_t c = 0; c < hd; ++c)
                    out[(i - q_begin) * D + h * hd + c] += s[j] / z * v[j * D + h * hd + c];
        }
    return out;
}

inline std::vector<double> slice_rows(const std::vector<double>& x, std::size_t r0, std::size_t n, std::size_t D) {
    return {x.begin() + static_cast<std::ptrdiff_t>(r0 * D), x.begin() + static_cast<std::ptrdiff_t>((r0 + n) * D)};
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

}  // namespace verify_detail

// ---------------------------------------------------------------------------
// grads

inline SuiteResult verify_grads(double op_tol = 1e-5, double net_tol = 1e-4) {
    using namespace verify_detail;
    SuiteResult out;
    auto op = [&](const std::string& n, const std::function<Tensor()>& f, std::vector<Tensor> in) {
        out.push_back(grad_check("op " + n, check_gradients(f, std::move(in)), op_tol));
    };
    auto a = leaf({3, 4}, 1), b = leaf({3, 4}, 2), m = leaf({4, 5}, 3), bias = leaf({4}, 4);
    op("add", [&] { return project_to_scalar(add(a, b)); }, {a, b});
    op("sub", [&] { return project_to_scalar(sub(a, b)); }, {a, b});
    op("mul", [&] { return project_to_scalar(mul(a, b)); }, {a, b});
    op("scale", [&] { return project_to_scalar(scale(a, 1.7)); }, {a});
    op("silu", [&] { return project_to_scalar(silu(a)); }, {a});
    op("sum/mean", [&] { return mul(sum(a), mean(b)); }, {a, b});
    op("mean_axis", [&] { return project_to_scalar(mean_axis(a, 0)); }, {a});
    op("reshape", [&] { return project_to_scalar(mul(reshape(a, {4, 3}), reshape(b, {4, 3}))); }, {a, b});
    op("transpose", [&] { return project_to_scalar(transpose(a)); }, {a});
    op("rows/concat_rows", [&] { return project_to_scalar(concat_rows({rows(a, 1, 2), b})); }, {a, b});
    op("columns/concat_cols", [&] { return project_to_scalar(concat_cols({columns(a, 0, 2), b})); }, {a, b});
    op("matmul", [&] { return project_to_scalar(matmul(a, m)); }, {a, m});
    op("matmul_nt", [&] { return project_to_scalar(matmul_nt(a, b)); }, {a, b});
    op("add_bias", [&] { return project_to_scalar(add_bias(a, bias)); }, {a, bias});
    op("softmax axis0", [&] { return project_to_scalar(softmax(a, 0)); }, {a});
    op("softmax axis1", [&] { return project_to_scalar(softmax(a, 1)); }, {a});
    {
        auto s = leaf({3, 7}, 5);
        op("causal_softmax", [&] { return project_to_scalar(causal_softmax(s, 0.6, 4)); }, {s});
    }
    {
        auto g = leaf({4}, 6), be = leaf({4}, 7);
        op("layer_norm", [&] { return project_to_scalar(layer_norm(a, g, be)); }, {a, g, be});
    }
    {
        auto idx = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{3, 0, 0, 11, 5, 7});
        op("gather", [&] { return project_to_scalar(gather(a, idx, {2, 3})); }, {a});
    }
    for (std::size_t k : {1u, 3u}) {
        auto x = leaf({2, 4, 3, 2}, 8), w = leaf({3, 2, k, k}, 9), cb = leaf({3}, 10);
        op("conv2d k=" + std::to_string(k), [&] { return project_to_scalar(conv2d(x, w, cb)); }, {x, w, cb});
    }
    {
        auto u = leaf({16}, 11), v = leaf({16}, 12);
        op("cosine_similarity", [&] { return cosine_similarity(u, v); }, {u, v});
    }
    {
        auto x = leaf({5, 8}, 13);
        const std::vector<std::int64_t> pos{0, 3, 9, 100, 4096};
        const RotaryEmbedding rope(8, 10000.0);
        op("rope_rotate", [&] { return project_to_scalar(rope_rotate(x, pos, rope)); }, {x});
    }
    {
        auto v = leaf({2, 2, 2, 3}, 14), w = leaf({2, 2, 2, 2}, 15);
        op("temporal_upsample", [&] { return project_to_scalar(temporal_upsample(v)); }, {v});
        op("concat_time/time_slice",
           [&] { return project_to_scalar(time_slice(concat_time({v, w}), 1, 3)); }, {v, w});
        const DiffusionSchedule sched(5);
        auto n = leaf({2, 2, 2, 3}, 16);
        op("forward_diffuse", [&] { return project_to_scalar(forward_diffuse(v, std::size_t{2}, n, sched)); }, {v, n});
    }
    {
        // Attention through a cache that already holds graph-carrying keys/values.
        AttentionConfig ac;
        ac.n_heads = 2;
        ac.model_dim = 8;
        CacheConfig cc{1, 8, 2, 4, 2};
        auto k0 = leaf({4, 8}, 17), v0 = leaf({4, 8}, 18), q = leaf({4, 8}, 19), k1 = leaf({4, 8}, 20),
             v1 = leaf({4, 8}, 21);
        op("attend (cache + block)",
           [&] {
               KVLayerCache c(cc);
               c.append(rows(k0, 0, 2), rows(v0, 0, 2), true);
               c.append(rows(k0, 2, 2), rows(v0, 2, 2), false);
               return project_to_scalar(attend(QueryBlock{q, k1, v1}, c, ac));
           },
           {k0, v0, q, k1, v1});
    }
    {
        auto x = leaf({6}, 22);
        // d/dx of the surrogate equals grad / N, the same as d/dx mean(x * grad_fixed).
        const Tensor g = Tensor::from({6}, {0.3, -1.2, 0.5, 2.0, -0.1, 0.0});
        x.zero_grad();
        backward(dmd_surrogate_loss(x, g));
        double err = 0.0;
        for (std::size_t i = 0; i < 6; ++i) err = std::max(err, std::abs(x.grad()[i] - g[i] / 6.0));
        out.push_back({"op dmd surrogate gradient == grad/N", err < 1e-15, "max err " + sci(err)});
    }

    // End-to-end nets.
    GeneratorConfig gc;  // 2 layers, dim 32
    const GeneratorNet net(gc, 3);
    const auto params = tensors_of(net.parameters());
    Rng nrng(4);
    const auto ctx_noise = ChunkNoise::draw(nrng, gc);
    const auto noise = ChunkNoise::draw(nrng, gc);
    auto text = make_text_embedding(4, gc.text_dim, 5);
    const FusedEmbedding cond{text.tokens, Provenance::TextOnly};
    auto generate = [&] {
        KVCache cache(gc.cache_config(1, 5));
        denoise_chunk(net, ctx_noise, cache, cond, gc.denoise_steps);
        return denoise_chunk(net, noise, cache, cond, gc.denoise_steps).data;
    };
    out.push_back(grad_check("net generator: sum(output) wrt every parameter tensor",
                             check_gradients_sampled([&] { return sum(generate()); }, params, 6, 21), net_tol));

    // DMD path: the surrogate's gradient must equal J^T g / N, i.e. the FD gradient of mean(x(theta) * g).
    {
        const Tensor x0 = generate();
        Rng r(6);
        const Tensor gfix = Tensor::randn(x0.shape(), r);
        for (auto p : params) p.zero_grad();
        backward(dmd_surrogate_loss(generate(), gfix));
        std::vector<std::vector<double>> analytic;
        for (const auto& p : params) analytic.push_back(p.grad());
        // Oracle: FD of the linear functional.
        auto lin = [&] { return mean(mul(generate(), gfix)); };
        const auto fd = check_gradients_sampled(lin, params, 6, 22);
        // Same sampled coordinates and gradients: compare the two analytic gradients too.
        double d2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::size_t j = 0; j < analytic[i].size(); ++j) {
                const double d = analytic[i][j] - params[i].grad()[j];
                d2 += d * d;
                n2 += analytic[i][j] * analytic[i][j];
            }
        const double rel = std::sqrt(d2) / std::max(std::sqrt(n2), 1e-300);
        out.push_back({"net DMD path: surrogate gradient vs FD of mean(x * g)", fd.rel_error < net_tol && rel < 1e-12,
                       "FD rel " + sci(fd.rel_error) + ", surrogate vs linear functional " + sci(rel)});
    }

    // L_3D through the frozen extractor and the generator.
    {
        const Extractor3D ex(gc.channels, 8);
        Rng r(7);
        const Tensor ref = Tensor::randn({gc.channels, gc.height, gc.width, kChunkLatents}, r);
        auto l3d = [&] { return loss_3d(ex.extract(VideoLatent(generate())), ex.extract(VideoLatent(ref))); };
        out.push_back(grad_check("net L_3D wrt generator parameters",
                                 check_gradients_sampled(l3d, params, 6, 23), net_tol));
        auto lat = leaf({gc.channels, gc.height, gc.width, kChunkLatents}, 24);
        out.push_back(grad_check(
            "net L_3D wrt both latents",
            check_gradients([&] { return loss_3d(ex.extract(VideoLatent(lat)), ex.extract(VideoLatent(ref))); }, {lat}),
            net_tol));
    }

    // Fusion with a non-zero zero-conv so every parameter is on the gradient path.
    {
        FusionConfig fc;
        FusionNet fn(fc, 8);
        Rng r(9);
        for (auto p : fn.parameters()) {
            auto w = p.tensor.mutable_data();
            for (auto& v : w) v += 0.1 * r.normal();
        }
        auto feat = leaf({fc.feature_channels, 4, 4, fc.feature_frames}, 25);
        const TextEmbedding te = make_text_embedding(fc.text_tokens, fc.text_dim, 3);
        auto ins = tensors_of(fn.parameters());
        ins.push_back(feat);
        out.push_back(grad_check("net fusion wrt parameters and features",
                                 check_gradients_sampled(
                                     [&] { return project_to_scalar(fuse(fn, te, Feature3D{feat, "t"}).tokens); }, ins, 8, 26),
                                 net_tol));
    }
    return out;
}

// ---------------------------------------------------------------------------
// cache

struct CacheEquivalenceStats {
    std::size_t configs = 0;
    double max_abs_diff = 0.0;
};

/// Random configurations whose whole sequence fits in sink + window: chunked cached
/// attention must equal one-shot causal attention over the full sequence.
inline CacheEquivalenceStats cache_equivalence(std::size_t n_configs, std::uint64_t seed) {
    using namespace verify_detail;
    CacheEquivalenceStats st;
    Rng rng(seed);
    for (std::size_t c = 0; c < n_configs; ++c) {
        const std::size_t heads = 1 + rng.below(3), hd = 2 * (1 + rng.below(4)), D = heads * hd;
        const std::size_t ft = 1 + rng.below(4), chunk = kChunkLatents * ft, n_chunks = 1 + rng.below(5);
        const std::size_t N = chunk * n_chunks;
        const double base = rng.uniform() < 0.5 ? 10000.0 : 100.0 + 1000.0 * rng.uniform();
        AttentionConfig ac;
        ac.n_heads = heads;
        ac.model_dim = D;
        ac.rope_base = base;
        const std::size_t slack = rng.below(3) * ft;
        KVLayerCache cache(CacheConfig{1, D, ft, N - ft + slack, ft});
        const auto q = rng.normals(N * D), k = rng.normals(N * D), v = rng.normals(N * D);
        const auto ref = reference_attention(q, k, v, N, heads, hd, base);
        NoGradGuard ng;
        for (std::size_t ch = 0; ch < n_chunks; ++ch) {
            auto blk = [&](const std::vector<double>& x) {
                return Tensor::from({chunk, D}, slice_rows(x, ch * chunk, chunk, D));
            };
            const Tensor Q = blk(q), K = blk(k), V = blk(v);
            const Tensor o = attend(QueryBlock{Q, K, V}, cache, ac);
            st.max_abs_diff = std::max(st.max_abs_diff, max_abs_diff(o.data(), slice_rows(ref, ch * chunk, chunk, D)));
            if (ch == 0) {
                cache.append(rows(K, 0, ft), rows(V, 0, ft), true);
                cache.append(rows(K, ft, chunk - ft), rows(V, ft, chunk - ft), false);
            } else {
                cache.append(K, V, false);
            }
        }
        ++st.configs;
    }
    return st;
}

inline SuiteResult verify_cache(std::size_t n_configs = 100) {
    using namespace verify_detail;
    SuiteResult out;
    const auto eq = cache_equivalence(n_configs, 2024);
    out.push_back({"chunked cached attention == full causal recompute (" + std::to_string(eq.configs) + " configs)",
                   eq.max_abs_diff < 1e-9, "max abs diff " + sci(eq.max_abs_diff)});

    // Eviction: the cached result equals the reference computed over live tokens only.
    {
        const std::size_t ft = 2, D = 8, heads = 2, hd = 4, S = ft, W = 3 * ft;
        AttentionConfig ac;
        ac.n_heads = heads;
        ac.model_dim = D;
        KVLayerCache cache(CacheConfig{1, D, S, W, ft});
        Rng rng(5);
        std::vector<std::vector<double>> kk, vv;  // per frame
        NoGradGuard ng;
        for (std::size_t f = 0; f < 9; ++f) {
            kk.push_back(rng.normals(ft * D));
            vv.push_back(rng.normals(ft * D));
            cache.append(Tensor::from({ft, D}, kk.back()), Tensor::from({ft, D}, vv.back()), f == 0);
        }
        const auto q = rng.normals(ft * D), kq = rng.normals(ft * D), vq = rng.normals(ft * D);
        const Tensor o = attend(QueryBlock{Tensor::from({ft, D}, q), Tensor::from({ft, D}, kq),
                                           Tensor::from({ft, D}, vq)}, cache, ac);
        // Live = frame 0 (sink) + frames 6, 7, 8.
        std::vector<double> K, V, Q;
        for (std::size_t f : {0u, 6u, 7u, 8u}) {
            K.insert(K.end(), kk[f].begin(), kk[f].end());
            V.insert(V.end(), vv[f].begin(), vv[f].end());
        }
        K.insert(K.end(), kq.begin(), kq.end());
        V.insert(V.end(), vq.begin(), vq.end());
        Q.assign(K.size(), 0.0);
        std::copy(q.begin(), q.end(), Q.end() - static_cast<std::ptrdiff_t>(q.size()));
        const std::size_t N = 5 * ft;
        const auto ref = reference_attention(Q, K, V, N, heads, hd, 10000.0, N - ft);
        const double d = max_abs_diff(o.data(), ref);
        out.push_back({"after eviction attention depends only on live tokens", d < 1e-9, "max abs diff " + sci(d)});
        out.push_back({"live tokens == S + W after overflow, oldest evicted", cache.live_tokens() == S + W &&
                           bit_equal(cache.live_key_values(), [&] {
                               std::vector<double> e = kk[0];
                               for (std::size_t f : {6u, 7u, 8u}) e.insert(e.end(), kk[f].begin(), kk[f].end());
                               return e;
                           }()),
                       "live " + std::to_string(cache.live_tokens())});
        out.push_back({"sink append after seal is a state error",
                       throws_as([&] { cache.append(Tensor::zeros({ft, D}), Tensor::zeros({ft, D}), true); },
                                 [](const std::exception& e) { return dynamic_cast<const StateError*>(&e) != nullptr; }),
                       ""});
        out.push_back({"empty cache with empty query is a state error",
                       throws_as([&] { attend(QueryBlock{Tensor::zeros({0, D}), Tensor::zeros({0, D}), Tensor::zeros({0, D})},
                                              KVLayerCache(CacheConfig{1, D, S, W, ft}), ac); },
                                 [](const std::exception& e) { return dynamic_cast<const StateError*>(&e) != nullptr; }),
                       ""});
    }

    // Attention rows sum to one; first query position equals the live count across an eviction.
    {
        AttentionConfig ac;
        ac.n_heads = 2;
        ac.model_dim = 8;
        KVLayerCache cache(CacheConfig{1, 8, 2, 4, 2});
        Rng rng(6);
        NoGradGuard ng;
        cache.append(Tensor::randn({2, 8}, rng), Tensor::randn({2, 8}, rng), true);
        cache.append(Tensor::randn({4, 8}, rng), Tensor::randn({4, 8}, rng), false);
        const Tensor q = Tensor::randn({3, 8}, rng), k = Tensor::randn({3, 8}, rng), v = Tensor::randn({3, 8}, rng);
        const auto r1 = attend_detailed(QueryBlock{q, k, v}, cache, ac, true);
        double worst = 0.0;
        for (const auto& p : r1.probs)
            for (std::size_t i = 0; i < p.dim(0); ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < p.dim(1); ++j) s += p[i * p.dim(1) + j];
                worst = std::max(worst, std::abs(s - 1.0));
            }
        out.push_back({"attention rows sum to 1", worst < 1e-12, "worst " + sci(worst)});
        cache.append(Tensor::randn({2, 8}, rng), Tensor::randn({2, 8}, rng), false);
        out.push_back({"first query position == live token count", cache.live_tokens() == 6, ""});
    }

    // Memory footprint is flat over 1000 chunk appends once the ring is full.
    {
        NoGradGuard ng;
        KVCache cache(CacheConfig{2, 16, 4, 16, 4});
        Rng rng(7);
        std::vector<double> bytes;
        for (std::size_t i = 0; i < 1000; ++i) {
            for (std::size_t l = 0; l < 2; ++l) {
                const bool sink = i == 0;
                cache.layer(l).append(Tensor::randn({4, 16}, rng), Tensor::randn({4, 16}, rng), sink);
            }
            if (i >= 10) bytes.push_back(static_cast<double>(cache.allocated_bytes()));
        }
        const auto [mn, mx] = std::minmax_element(bytes.begin(), bytes.end());
        out.push_back({"allocated bytes constant over 1000 appends", *mn == *mx && cache.stored_tokens() <= 4 + 16,
                       std::to_string(static_cast<long long>(*mx)) + " bytes"});
    }

    // EWKV round trip.
    {
        NoGradGuard ng;
        KVCache cache(CacheConfig{2, 8, 2, 6, 2});
        Rng rng(8);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t l = 0; l < 2; ++l)
                cache.layer(l).append(Tensor::randn({2, 8}, rng), Tensor::randn({2, 8}, rng), i == 0);
        cache.set_visible_tokens(4);
        std::stringstream ss;
        cache.write(ss);
        const auto back = KVCache::read(ss);
        bool same = back.config() == cache.config();
        for (std::size_t l = 0; l < 2 && same; ++l)
            same = bit_equal(back.layer(l).live_key_values(), cache.layer(l).live_key_values()) &&
                   bit_equal(back.layer(l).live_value_values(), cache.layer(l).live_value_values()) &&
                   back.layer(l).total_appended() == cache.layer(l).total_appended() &&
                   back.layer(l).stored_tokens() == cache.layer(l).stored_tokens();
        out.push_back({"EWKV snapshot round trip is bit-exact", same, ""});
    }
    return out;
}

// ---------------------------------------------------------------------------
// rope

inline SuiteResult verify_rope() {
    using namespace verify_detail;
    SuiteResult out;
    const RotaryEmbedding rope(16, 10000.0);
    Rng rng(31);
    NoGradGuard ng;
    const Tensor x = Tensor::randn({8, 16}, rng);
    const std::vector<std::int64_t> zeros(8, 0);
    out.push_back({"position 0 is the identity (bit-exact)", bit_equal(rope_rotate(x, zeros, rope).data(), x.data()), ""});

    double worst_norm = 0.0;
    for (std::int64_t p : {1ll, 2ll, 17ll, 1000ll, 123456ll, -5ll}) {
        const std::vector<std::int64_t> pos(8, p);
        const Tensor y = rope_rotate(x, pos, rope);
        for (std::size_t t = 0; t < 8; ++t) {
            double a = 0.0, b = 0.0;
            for (std::size_t c = 0; c < 16; ++c) {
                a += x[t * 16 + c] * x[t * 16 + c];
                b += y[t * 16 + c] * y[t * 16 + c];
            }
            worst_norm = std::max(worst_norm, std::abs(std::sqrt(a) - std::sqrt(b)));
        }
    }
    out.push_back({"rotation preserves norms", worst_norm < 1e-12, "worst " + sci(worst_norm)});

    double worst_rel = 0.0;
    for (std::int64_t delta : {1ll, 7ll, 100ll})
        for (std::size_t trial = 0; trial < 50; ++trial) {
            const Tensor q = Tensor::randn({1, 16}, rng), k = Tensor::randn({1, 16}, rng);
            const std::int64_t m = static_cast<std::int64_t>(rng.below(200)), n = static_cast<std::int64_t>(rng.below(200));
            auto dot = [&](std::int64_t pm, std::int64_t pn) {
                const std::vector<std::int64_t> a{pm}, b{pn};
                const Tensor qr = rope_rotate(q, a, rope), kr = rope_rotate(k, b, rope);
                double d = 0.0;
                for (std::size_t c = 0; c < 16; ++c) d += qr[c] * kr[c];
                return d;
            };
            worst_rel = std::max(worst_rel, std::abs(dot(m, n) - dot(m + delta, n + delta)));
        }
    out.push_back({"dot(rot(q,m), rot(k,n)) invariant under shift (1, 7, 100)", worst_rel < 1e-9,
                   "worst abs diff " + sci(worst_rel)});
    out.push_back({"odd head_dim is a config error",
                   throws_as([] { RotaryEmbedding(7, 10000.0); },
                             [](const std::exception& e) { return dynamic_cast<const ConfigError*>(&e) != nullptr; }),
                   ""});
    return out;
}

// ---------------------------------------------------------------------------
// schedule

inline SuiteResult verify_schedule() {
    using namespace verify_detail;
    SuiteResult out;
    RolloutState st;
    std::string seq;
    bool budgets = true;
    for (int i = 0; i < 6; ++i) {
        const auto p = next_phase(st);
        seq += p.mode == ContextMode::LongContext ? 'L' : 'S';
        budgets = budgets && ((p.context_latents == 18 && p.generate_latents == 3 && p.mode == ContextMode::LongContext) ||
                              (p.context_latents == 3 && p.generate_latents == 18 && p.mode == ContextMode::ShortContext));
    }
    out.push_back({"phases alternate L,S,L,S,L,S from a fresh state", seq == "LSLSLS", seq});
    out.push_back({"phase budgets are (18,3) long and (3,18) short", budgets, ""});
    const ScheduleConfig sc;
    out.push_back({"window budgets: 17 latents long, 2 short, sink 1",
                   sc.window_latents(ContextMode::LongContext) == 17 && sc.window_latents(ContextMode::ShortContext) == 2 &&
                       sc.sink_latents == 1,
                   ""});
    bool frames = frames_for_latents(1) == 1 && frames_for_latents(3) == 9 && frames_for_latents(21) == 81;
    out.push_back({"d' = 4(d-1)+1 for d in {1,3,21} -> {1,9,81}", frames, ""});
    out.push_back({"d = 0 is a domain error",
                   throws_as([] { frames_for_latents(0); },
                             [](const std::exception& e) { return dynamic_cast<const DomainError*>(&e) != nullptr; }),
                   ""});
    out.push_back({"long phase: 17 context latents = 68 frames, 3 generated = 12 frames",
                   4 * (18 - 1) == 68 && 4 * 3 == 12 && frames_for_latents(3) == 9, ""});

    // Accounting over a real stream.
    {
        ModelConfig mc;
        const Nets nets(mc, 1);
        auto state = RolloutState::fresh(mc.generator, sc, 3);
        std::size_t records = 0;
        StreamHooks h;
        h.sink = [&](std::uint64_t, const Tensor&) { ++records; };
        const auto rep = stream(nets, state, 42, h);
        out.push_back({"target 42 latents -> 42 emitted, 14 chunks, 4 phases",
                       records == 42 && rep.chunks.size() == 14 && state.phases_started == 4,
                       std::to_string(records) + " latents, " + std::to_string(rep.chunks.size()) + " chunks, " +
                           std::to_string(state.phases_started) + " phases"});
        out.push_back({"frames emitted == frames_for_latents(latents emitted)",
                       rep.total_frames == frames_for_latents(42) && rep.total_frames == 165, std::to_string(rep.total_frames)});
        auto empty = RolloutState::fresh(mc.generator, sc, 3);
        const auto r0 = stream(nets, empty, 0, h);
        out.push_back({"target 0 -> empty stream and report", r0.chunks.empty() && r0.latents_emitted == 0, ""});
    }

    // Diffusion grid.
    {
        const DiffusionSchedule ds(5);
        double worst = 0.0;
        for (std::size_t i = 0; i < ds.size(); ++i)
            worst = std::max(worst, std::abs(ds.alpha(i) * ds.alpha(i) + ds.sigma(i) * ds.sigma(i) - 1.0));
        out.push_back({"alpha^2 + sigma^2 = 1 on the grid", worst < 1e-15 && ds.alpha(0) == 1.0 && ds.sigma(0) == 0.0,
                       "worst " + sci(worst)});
        out.push_back({"off-grid t is a schedule error",
                       throws_as([&] { ds.index_of(0.3); },
                                 [](const std::exception& e) { return dynamic_cast<const ScheduleError*>(&e) != nullptr; }),
                       ""});
    }
    return out;
}

// ---------------------------------------------------------------------------
// dmd

inline SuiteResult verify_dmd(GaussianDmdResult* toy = nullptr, double* toy_seconds = nullptr) {
    using namespace verify_detail;
    SuiteResult out;
    // Score oracle: s(x) = grad log N(x; a mu, a^2 C + s^2 I) against FD of the closed-form log density.
    {
        const auto model = GaussianSequenceScore::ar1(5, {0.3, 0.8});
        const double al = 0.8, si = 0.6;
        Rng rng(41);
        const auto x = rng.normals(2 * 5);
        const auto s = model.score(x, al, si);
        auto logp = [&](const std::vector<double>& y) {
            double acc = 0.0;
            for (std::size_t site = 0; site < 2; ++site) {
                Eigen::MatrixXd C = al * al * model.cov(site);
                C.diagonal().array() += si * si;
                const Eigen::Map<const Eigen::VectorXd> v(y.data() + site * 5, 5);
                const Eigen::VectorXd r = v - al * model.mean(site);
                acc += -0.5 * r.dot(C.ldlt().solve(r));
            }
            return acc;
        };
        double err = 0.0, nrm = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            auto p = x, m = x;
            p[i] += 1e-5;
            m[i] -= 1e-5;
            const double fd = (logp(p) - logp(m)) / 2e-5;
            err += (fd - s[i]) * (fd - s[i]);
            nrm += s[i] * s[i];
        }
        const double rel = std::sqrt(err / nrm);
        out.push_back({"Gaussian score == FD of log density", rel < 1e-6, "rel " + sci(rel)});
    }
    // Matched scores: the DMD gradient vanishes.
    {
        ScorePair sp;
        sp.real = GaussianSequenceScore::ar1(7, {0.5, 0.9});
        std::vector<std::vector<double>> samples;
        Rng rng(42);
        for (int i = 0; i < 3; ++i) samples.push_back(rng.normals(4 * 7));
        std::vector<std::span<const double>> spans(samples.begin(), samples.end());
        sp.refit(spans, 7, 2, 0);
        sp.fake = sp.real;
        const DiffusionSchedule sched(9);
        const Tensor x = Tensor::from({4, 7}, rng.normals(28)), n = Tensor::from({4, 7}, rng.normals(28));
        double worst = 0.0;
        for (std::size_t t = 1; t + 1 < sched.size(); ++t) {
            const Tensor g = dmd_generator_grad(x, sp, t, n, sched, 0);
            for (double v : g.data()) worst = std::max(worst, std::abs(v));
        }
        out.push_back({"score-matched distributions give zero DMD gradient", worst <= 1e-12, "max " + sci(worst)});
        out.push_back({"stale fake score is rejected",
                       throws_as([&] { dmd_generator_grad(x, sp, 2, n, sched, 5); },
                                 [](const std::exception& e) { return dynamic_cast<const StalenessError*>(&e) != nullptr; }),
                       ""});
    }
    // 1-D toy distillation.
    {
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = train_gaussian_dmd(GaussianDmdConfig{});
        const double secs = seconds_since(t0);
        if (toy) *toy = r;
        if (toy_seconds) *toy_seconds = secs;
        out.push_back({"1-D toy: KL(generator || N(3,1)) < 0.01", r.final_kl < 0.01,
                       "KL " + sci(r.final_kl) + ", mean " + fmt("%.4f", r.mean) + ", var " + fmt("%.4f", r.var) + ", " +
                           fmt("%.2f", secs) + " s"});
        out.push_back({"1-D toy: KL analytic formula", std::abs(gaussian_kl(3, 1, 3, 1)) < 1e-15 &&
                           std::abs(gaussian_kl(0, 1, 1, 1) - 0.5) < 1e-15 &&
                           std::abs(gaussian_kl(0, 2, 0, 1) - 0.5 * (std::log(0.5) + 2 - 1)) < 1e-15,
                       ""});
    }
    return out;
}

// ---------------------------------------------------------------------------
// fusion

inline SuiteResult verify_fusion() {
    using namespace verify_detail;
    SuiteResult out;
    ModelConfig mc;
    Nets nets(mc, 7);
    Rng rng(51);
    const Tensor chunk = Tensor::randn({mc.generator.channels, mc.generator.height, mc.generator.width, 3}, rng);
    const auto f3d = nets.extractor.extract(VideoLatent(chunk));
    out.push_back({"feature temporal extent is 4(d-1)+1 (d=3 -> 9)", f3d.data.dim(3) == 9 && f3d.version == Extractor3D::kVersion,
                   shape_str(f3d.data.shape())});
    bool frozen = true;
    for (const auto& p : nets.extractor.parameters()) frozen = frozen && !p.tensor.requires_grad();
    out.push_back({"extractor parameters are frozen", frozen, ""});

    const auto fused = fuse(nets.fusion, nets.text, f3d);
    out.push_back({"fresh fusion: e_fused == e_text bit-exactly", bit_equal(fused.tokens.data(), nets.text.tokens.data()), ""});

    // One optimizer step with a non-zero gradient moves the zero conv off zero.
    Adam opt(tensors_of(nets.fusion.parameters()), {1e-2});
    opt.zero_grad();
    Rng r2(52);
    backward(sum(mul(fuse(nets.fusion, nets.text, f3d).tokens, Tensor::randn(nets.text.tokens.shape(), r2))));
    const double gz = nets.fusion.zero_conv_weight().grad_norm();
    opt.step();
    const auto after = fuse(nets.fusion, nets.text, f3d);
    out.push_back({"after one non-zero update: e_fused != e_text", gz > 0.0 && !bit_equal(after.tokens.data(), nets.text.tokens.data()),
                   "zero-conv grad norm " + sci(gz)});
    const auto bypass = fuse_optional(nets.fusion, nets.text, std::nullopt);
    out.push_back({"missing 3D features fall back to text only",
                   bypass.provenance == Provenance::TextOnly && bit_equal(bypass.tokens.data(), nets.text.tokens.data()), ""});
    out.push_back({"feature extent mismatch is a dimension error",
                   throws_as([&] { fuse(nets.fusion, nets.text, Feature3D{Tensor::zeros({8, 8, 8, 5}), "x"}); },
                             [](const std::exception& e) { return dynamic_cast<const DimensionError*>(&e) != nullptr; }),
                   ""});
    return out;
}

// ---------------------------------------------------------------------------
// training-level properties (acceptance)

struct DetachWallStats {
    std::size_t steps = 0;
    std::size_t detached_nonzero = 0;
    std::size_t baseline_positive = 0;
    double detached_max = 0.0;
    double seconds = 0.0;
};

inline DetachWallStats detach_wall(std::size_t steps, std::uint64_t seed) {
    DetachWallStats st;
    st.steps = steps;
    const auto t0 = std::chrono::steady_clock::now();
    for (bool det : {true, false}) {
        TrainConfig tc;
        tc.steps = steps;
        tc.seed = seed;
        tc.detach_conditioning = det;
        Trainer tr(tc, ModelConfig{}, seed);
        for (std::size_t i = 0; i < steps; ++i) {
            const auto r = tr.step();
            if (det) {
                if (r.grad_prefix != 0.0) ++st.detached_nonzero;
                st.detached_max = std::max(st.detached_max, r.grad_prefix);
            } else if (r.grad_prefix > 0.0) {
                ++st.baseline_positive;
            }
        }
    }
    st.seconds = verify_detail::seconds_since(t0);
    return st;
}

struct StreamBenchStats {
    std::size_t chunks = 0;
    std::size_t repeats = 0;
    std::size_t max_live = 0;
    std::size_t bound = 0;
    bool sink_always_present = true;
    double first_quartile_median_ms = 0.0;
    double last_quartile_p95_ms = 0.0;
    double ratio = 0.0;             // on per-chunk minima across repeats
    double single_run_ratio = 0.0;  // first repeat alone
    double bytes_cv = 0.0;          // stddev/mean of cache bytes after warm-up
    double seconds = 0.0;
    std::vector<double> wall_ms;    // per-chunk minimum
};

inline double percentile(std::vector<double> v, double p) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos)), hi = static_cast<std::size_t>(std::ceil(pos));
    return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

/// Latency flatness: p95 over the last quarter of chunks / median over the first quarter.
inline double quartile_ratio(const std::vector<double>& ms, double* first_med = nullptr, double* last_p95 = nullptr) {
    const std::size_t q = std::max<std::size_t>(1, ms.size() / 4);
    const std::vector<double> first(ms.begin(), ms.begin() + static_cast<std::ptrdiff_t>(q));
    const std::vector<double> last(ms.end() - static_cast<std::ptrdiff_t>(q), ms.end());
    const double a = percentile(first, 0.5), b = percentile(last, 0.95);
    if (first_med) *first_med = a;
    if (last_p95) *last_p95 = b;
    return b / a;
}

inline double coefficient_of_variation(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size())) / m;
}

/// Repeats an identical seeded rollout and keeps each chunk's fastest wall time. Interference
/// from the OS only ever adds time, so the minimum is the cleanest estimate of a chunk's cost.
inline StreamBenchStats stream_bench(std::uint64_t latents, std::size_t repeats, std::uint64_t seed) {
    StreamBenchStats st;
    st.repeats = repeats;
    const auto t0 = std::chrono::steady_clock::now();
    ModelConfig mc;
    const Nets nets(mc, seed);
    std::vector<std::vector<double>> runs;
    std::vector<double> bytes;
    for (std::size_t r = 0; r < repeats; ++r) {
        auto state = RolloutState::fresh(mc.generator, ScheduleConfig{}, seed);
        const std::size_t S = state.gen.cache.config().sink_tokens;
        StreamHooks h;
        h.on_chunk = [&](const ChunkReport&, const RolloutState& s) {
            for (std::size_t l = 0; l < s.gen.cache.num_layers(); ++l)
                st.sink_always_present = st.sink_always_present && s.gen.cache.layer(l).sink_count() == S;
        };
        const auto rep = stream(nets, state, latents, h);
        std::vector<double> ms;
        for (const auto& c : rep.chunks) ms.push_back(c.wall_ms);
        runs.push_back(std::move(ms));
        st.max_live = std::max(st.max_live, rep.max_live_tokens);
        st.bound = rep.live_token_bound;
        if (r == 0) {
            st.chunks = rep.chunks.size();
            for (std::size_t i = rep.chunks.size() / 4; i < rep.chunks.size(); ++i)
                bytes.push_back(static_cast<double>(rep.chunks[i].cache_bytes));
        }
    }
    st.single_run_ratio = quartile_ratio(runs.front());
    for (std::size_t i = 0; i < st.chunks; ++i) {
        std::vector<double> xs;
        for (const auto& r : runs) xs.push_back(r[i]);
        st.wall_ms.push_back(*std::min_element(xs.begin(), xs.end()));
    }
    st.ratio = quartile_ratio(st.wall_ms, &st.first_quartile_median_ms, &st.last_quartile_p95_ms);
    st.bytes_cv = coefficient_of_variation(bytes);
    st.seconds = verify_detail::seconds_since(t0);
    return st;
}

struct ResumeStats {
    std::size_t latents = 0;
    std::size_t split = 0;
    bool identical = false;
};

/// Streams `total` latents in one go and again with a snapshot/restore after `split` latents.
inline ResumeStats resume_equivalence(std::uint64_t total, std::uint64_t split, std::uint64_t seed,
                                      const std::string& snapshot_path) {
    ModelConfig mc;
    const Nets nets(mc, seed);
    auto collect = [](std::vector<std::pair<std::uint64_t, std::vector<double>>>& v) {
        StreamHooks h;
        h.sink = [&v](std::uint64_t c, const Tensor& f) { v.push_back({c, f.values()}); };
        return h;
    };
    std::vector<std::pair<std::uint64_t, std::vector<double>>> a, b;
    auto s1 = RolloutState::fresh(mc.generator, ScheduleConfig{}, seed);
    stream(nets, s1, total, collect(a));
    auto s2 = RolloutState::fresh(mc.generator, ScheduleConfig{}, seed);
    stream(nets, s2, split, collect(b));
    s2.save(snapshot_path, 0);
    auto s3 = RolloutState::load(snapshot_path);
    stream(nets, s3, total - split, collect(b));
    std::filesystem::remove(snapshot_path);
    ResumeStats st;
    st.latents = a.size();
    st.split = split;
    st.identical = a.size() == total && a.size() == b.size();
    for (std::size_t i = 0; st.identical && i < a.size(); ++i)
        st.identical = a[i].first == b[i].first && verify_detail::bit_equal(a[i].second, b[i].second);
    return st;
}

using SuiteFn = std::function<SuiteResult()>;

inline const std::map<std::string, SuiteFn>& verify_suites() {
    static const std::map<std::string, SuiteFn> suites{
        {"grads", [] { return verify_grads(); }},   {"cache", [] { return verify_cache(); }},
        {"rope", [] { return verify_rope(); }},     {"schedule", [] { return verify_schedule(); }},
        {"dmd", [] { return verify_dmd(); }},       {"fusion", [] { return verify_fusion(); }},
    };
    return suites;
}

}  // namespace ew
