#pragma once

// Block-causal multi-head attention over a KV cache made of a persistent sink
// segment and a frame-aligned rolling window.
//
// Keys are cached un-rotated. At read time every live token gets a compact
// position: sink tokens 0..S-1, window tokens next in cache order, then the
// query block. Positions therefore stay bounded however long the stream runs,
// and the first query position always equals the live token count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ew/binary_io.hpp"
#include "ew/errors.hpp"
#include "ew/tensor.hpp"

namespace ew {

struct RotaryEmbedding {
    std::size_t head_dim = 16;
    double base = 10000.0;

    RotaryEmbedding() = default;
    RotaryEmbedding(std::size_t hd, double b) : head_dim(hd), base(b) { validate(); }

    void validate() const {
        if (head_dim == 0 || head_dim % 2 != 0)
            throw ConfigError("rotary head_dim must be even and positive, got " + std::to_string(head_dim));
        if (!(base > 0.0)) throw ConfigError("rotary base must be positive");
    }

    /// theta_j = base^(-2j / head_dim) for channel pair j.
    double frequency(std::size_t pair) const {
        return std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(head_dim));
    }
};

namespace detail {

// cos/sin of pos * theta_j for small non-negative positions, filled on demand. Entries are
// computed with the same expression as the uncached path, so results do not depend on the cache.
struct RopeTable {
    static constexpr std::size_t kMaxCached = 1u << 16;
    RotaryEmbedding rope;
    std::vector<double> cos, sin;
    std::size_t rows = 0;

    void ensure(std::size_t pos) {
        if (pos < rows) return;
        const std::size_t pairs = rope.head_dim / 2;
        const std::size_t want = std::min(kMaxCached, std::max(pos + 1, 2 * rows));
        cos.resize(want * pairs);
        sin.resize(want * pairs);
        for (std::size_t p = rows; p < want; ++p)
            for (std::size_t j = 0; j < pairs; ++j) {
                const double ang = static_cast<double>(static_cast<std::int64_t>(p)) * rope.frequency(j);
                cos[p * pairs + j] = std::cos(ang);
                sin[p * pairs + j] = std::sin(ang);
            }
        rows = want;
    }
};

inline RopeTable& rope_table(const RotaryEmbedding& rope) {
    thread_local std::vector<std::unique_ptr<RopeTable>> tables;
    for (auto& t : tables)
        if (t->rope.head_dim == rope.head_dim && t->rope.base == rope.base) return *t;
    tables.push_back(std::make_unique<RopeTable>());
    tables.back()->rope = rope;
    return *tables.back();
}

}  // namespace detail

/// Rotates each channel pair (2j, 2j+1) of token i by positions[i] * theta_j.
inline Tensor rope_rotate(const Tensor& x, std::span<const std::int64_t> positions, const RotaryEmbedding& rope) {
    rope.validate();
    if (x.rank() != 2 || x.dim(1) != rope.head_dim)
        throw DimensionError("rope_rotate: expected [tokens x " + std::to_string(rope.head_dim) + "], got " +
                             shape_str(x.shape()));
    if (positions.size() != x.dim(0)) throw DimensionError("rope_rotate: one position per token required");
    const std::size_t T = x.dim(0), hd = rope.head_dim, pairs = hd / 2;
    std::vector<double> cs(T * pairs), sn(T * pairs);
    auto& table = detail::rope_table(rope);
    for (std::size_t t = 0; t < T; ++t) {
        const auto pos = positions[t];
        if (pos >= 0 && static_cast<std::size_t>(pos) < detail::RopeTable::kMaxCached) {
            table.ensure(static_cast<std::size_t>(pos));
            std::copy_n(table.cos.begin() + pos * pairs, pairs, cs.begin() + t * pairs);
            std::copy_n(table.sin.begin() + pos * pairs, pairs, sn.begin() + t * pairs);
        } else {
            for (std::size_t j = 0; j < pairs; ++j) {
                const double ang = static_cast<double>(pos) * rope.frequency(j);
                cs[t * pairs + j] = std::cos(ang);
                sn[t * pairs + j] = std::sin(ang);
            }
        }
    }
    std::vector<double> out(x.numel());
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < pairs; ++j) {
            const double a = x[t * hd + 2 * j], b = x[t * hd + 2 * j + 1];
            const double c = cs[t * pairs + j], s = sn[t * pairs + j];
            out[t * hd + 2 * j] = a * c - b * s;
            out[t * hd + 2 * j + 1] = a * s + b * c;
        }
    return make_result(x.shape(), std::move(out), {x}, "rope",
                       [T, hd, pairs, cs = std::move(cs), sn = std::move(sn)](detail::Node& self) {
                           auto* g = detail::grad_of(self, 0);
                           if (!g) return;
                           // Transpose of a rotation is the rotation by the negative angle.
                           for (std::size_t t = 0; t < T; ++t)
                               for (std::size_t j = 0; j < pairs; ++j) {
                                   const double ga = self.grad[t * hd + 2 * j], gb = self.grad[t * hd + 2 * j + 1];
                                   const double c = cs[t * pairs + j], s = sn[t * pairs + j];
                                   (*g)[t * hd + 2 * j] += ga * c + gb * s;
                                   (*g)[t * hd + 2 * j + 1] += -ga * s + gb * c;
                               }
                       });
}

struct AttentionConfig {
    std::size_t n_heads = 2;
    std::size_t model_dim = 32;
    std::size_t window_tokens = 0;  // W, excluding the sink
    std::size_t sink_tokens = 0;    // S
    double rope_base = 10000.0;

    std::size_t head_dim() const { return model_dim / n_heads; }

    void validate() const {
        if (n_heads == 0 || model_dim % n_heads != 0)
            throw ConfigError("model_dim " + std::to_string(model_dim) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        RotaryEmbedding(head_dim(), rope_base).validate();
    }

    RotaryEmbedding rope() const { return {head_dim(), rope_base}; }
};

struct CacheConfig {
    std::size_t layers = 1;
    std::size_t model_dim = 32;
    std::size_t sink_tokens = 0;        // S
    std::size_t max_window_tokens = 0;  // ring capacity; the active window W may be smaller
    std::size_t frame_tokens = 1;       // eviction granularity

    void validate() const {
        if (model_dim == 0 || frame_tokens == 0) throw ConfigError("cache: model_dim and frame_tokens must be > 0");
        if (max_window_tokens % frame_tokens != 0)
            throw ConfigError("cache: window capacity must be a whole number of frames");
    }

    friend bool operator==(const CacheConfig&, const CacheConfig&) = default;
};

/// One layer's sink + rolling window.
class KVLayerCache {
public:
    struct Entry {
        Tensor keys;
        Tensor values;
    };

    KVLayerCache() = default;
    explicit KVLayerCache(const CacheConfig& cfg)
        : cfg_(cfg),
          slots_(cfg.max_window_tokens / cfg.frame_tokens),
          active_frames_(slots_.size()),
          visible_frames_(slots_.size()) {}

    /// Sink appends fill the sink segment and seal it once S tokens are held.
    /// Window appends are split into frames; the oldest frames are evicted past capacity.
    void append(const Tensor& keys, const Tensor& values, bool is_sink) {
        check_block(keys, values);
        memo_.reset();
        const std::size_t n = keys.dim(0);
        if (is_sink) {
            if (sealed_) throw StateError("sink append after the sink segment was sealed");
            if (sink_count_ + n > cfg_.sink_tokens)
                throw StateError("sink append of " + std::to_string(n) + " tokens overflows sink capacity " +
                                 std::to_string(cfg_.sink_tokens));
            sink_.push_back({store(keys), store(values)});
            sink_count_ += n;
            if (sink_count_ == cfg_.sink_tokens) sealed_ = true;
        } else {
            const std::size_t ft = cfg_.frame_tokens;
            if (n % ft != 0)
                throw DimensionError("window append of " + std::to_string(n) + " tokens is not frame aligned (" +
                                     std::to_string(ft) + " tokens per frame)");
            for (std::size_t f = 0; f < n / ft; ++f) push_frame(rows(keys, f * ft, ft), rows(values, f * ft, ft));
        }
        total_appended_ += n;
    }

    /// Resizes the active window, evicting the oldest frames down to the new budget at once.
    void set_window_tokens(std::size_t w) {
        if (w % cfg_.frame_tokens != 0 || w > cfg_.max_window_tokens)
            throw ConfigError("window of " + std::to_string(w) + " tokens is not a frame multiple within capacity " +
                              std::to_string(cfg_.max_window_tokens));
        active_frames_ = w / cfg_.frame_tokens;
        while (count_ > active_frames_) evict_oldest();
        memo_.reset();
    }

    /// Limits attention to the most recent w window tokens without evicting anything.
    void set_visible_tokens(std::size_t w) {
        if (w % cfg_.frame_tokens != 0 || w > cfg_.max_window_tokens)
            throw ConfigError("visible window of " + std::to_string(w) +
                              " tokens is not a frame multiple within capacity " +
                              std::to_string(cfg_.max_window_tokens));
        visible_frames_ = w / cfg_.frame_tokens;
        memo_.reset();
    }

    std::size_t window_tokens() const { return active_frames_ * cfg_.frame_tokens; }
    std::size_t visible_tokens() const { return visible_frames_ * cfg_.frame_tokens; }
    std::size_t sink_count() const { return sink_count_; }
    std::size_t window_count() const { return count_ * cfg_.frame_tokens; }
    /// Tokens held (sink + window), visible or not.
    std::size_t stored_tokens() const { return sink_count_ + window_count(); }
    /// Tokens attention reads: the sink plus the visible tail of the window.
    std::size_t live_tokens() const { return sink_count_ + shown_frames() * cfg_.frame_tokens; }
    std::uint64_t total_appended() const { return total_appended_; }
    bool sealed() const { return sealed_; }

    /// Live entries in cache order: sink groups first, then visible window frames oldest to newest.
    std::vector<Entry> live() const {
        std::vector<Entry> out(sink_.begin(), sink_.end());
        for (std::size_t i = count_ - shown_frames(); i < count_; ++i) out.push_back(slots_[(head_ + i) % slots_.size()]);
        return out;
    }

    std::vector<double> live_key_values() const { return flatten(&Entry::keys); }
    std::vector<double> live_value_values() const { return flatten(&Entry::values); }

    /// Bytes held by key/value buffers, including evicted-but-retained ring slots.
    std::size_t allocated_bytes() const {
        std::size_t b = 0;
        for (const auto& e : sink_) b += (e.keys.values().capacity() + e.values.values().capacity()) * sizeof(double);
        for (const auto& e : slots_) b += (e.keys.values().capacity() + e.values.values().capacity()) * sizeof(double);
        return b;
    }

    const CacheConfig& config() const { return cfg_; }

    /// Live keys rotated to their positions and live values, split per head. Rebuilt only when
    /// the cache changes, so the denoising passes of one chunk share it.
    struct HeadContext {
        std::size_t heads = 0;
        double base = 0.0;
        bool with_grad = false;
        std::vector<Tensor> k, v;  // per head, [live x head_dim]
    };

    const HeadContext& head_context(std::size_t heads, std::size_t head_dim, double base) const {
        if (memo_ && memo_->heads == heads && memo_->base == base && memo_->with_grad == grad_enabled()) return *memo_;
        auto m = std::make_shared<HeadContext>();
        m->heads = heads;
        m->base = base;
        m->with_grad = grad_enabled();
        const auto es = live();
        if (!es.empty()) {
            std::vector<Tensor> ks, vs;
            for (const auto& e : es) {
                ks.push_back(e.keys);
                vs.push_back(e.values);
            }
            const Tensor K = ks.size() == 1 ? ks[0] : concat_rows(ks), V = vs.size() == 1 ? vs[0] : concat_rows(vs);
            std::vector<std::int64_t> pos(K.dim(0));
            for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i);
            const RotaryEmbedding rope(head_dim, base);
            for (std::size_t h = 0; h < heads; ++h) {
                m->k.push_back(rope_rotate(columns(K, h * head_dim, head_dim), pos, rope));
                m->v.push_back(columns(V, h * head_dim, head_dim));
            }
        }
        memo_ = std::move(m);
        return *memo_;
    }

    void write(std::ostream& os) const {
        io::write_u32(os, static_cast<std::uint32_t>(sink_count_));
        io::write_u32(os, static_cast<std::uint32_t>(window_count()));
        io::write_u32(os, static_cast<std::uint32_t>(window_tokens()));
        io::write_u32(os, static_cast<std::uint32_t>(visible_tokens()));
        io::write_u32(os, sealed_ ? 1u : 0u);
        io::write_u64(os, total_appended_);
        auto sk = flatten_range(sink_, &Entry::keys), sv = flatten_range(sink_, &Entry::values);
        io::write_f64s(os, sk);
        io::write_f64s(os, sv);
        io::write_f64s(os, window_flat(&Entry::keys));
        io::write_f64s(os, window_flat(&Entry::values));
    }

    void read(std::istream& is) {
        const std::size_t d = cfg_.model_dim;
        const std::size_t ns = io::read_u32(is), nw = io::read_u32(is), active = io::read_u32(is);
        const std::size_t visible = io::read_u32(is);
        const bool sealed = io::read_u32(is) != 0;
        const std::uint64_t total = io::read_u64(is);
        if (ns > cfg_.sink_tokens || nw > cfg_.max_window_tokens || nw % cfg_.frame_tokens != 0)
            throw FormatError("cache snapshot counts exceed configured capacity");
        auto sk = io::read_f64s(is, ns * d), sv = io::read_f64s(is, ns * d);
        auto wk = io::read_f64s(is, nw * d), wv = io::read_f64s(is, nw * d);
        *this = KVLayerCache(cfg_);
        if (ns) sink_.push_back({Tensor::from({ns, d}, std::move(sk)), Tensor::from({ns, d}, std::move(sv))});
        sink_count_ = ns;
        sealed_ = sealed;
        set_window_tokens(active);
        set_visible_tokens(visible);
        if (nw) {
            auto kt = Tensor::from({nw, d}, std::move(wk)), vt = Tensor::from({nw, d}, std::move(wv));
            const std::size_t ft = cfg_.frame_tokens;
            for (std::size_t f = 0; f < nw / ft; ++f) push_frame(rows(kt, f * ft, ft), rows(vt, f * ft, ft));
        }
        total_appended_ = total;
    }

private:
    std::size_t shown_frames() const { return std::min(count_, visible_frames_); }

    void check_block(const Tensor& k, const Tensor& v) const {
        if (k.rank() != 2 || k.dim(1) != cfg_.model_dim || k.shape() != v.shape())
            throw DimensionError("cache append: keys " + shape_str(k.shape()) + " / values " + shape_str(v.shape()) +
                                 " do not match model_dim " + std::to_string(cfg_.model_dim));
    }

    // Graph-carrying tensors are kept as-is so gradients can flow through the cache;
    // plain values are copied into the slot's existing buffer when possible.
    static Tensor store(const Tensor& t) {
        if (t.requires_grad()) return t;
        return Tensor::from(t.shape(), t.values());
    }

    static void assign(Tensor& slot, const Tensor& t) {
        if (!t.requires_grad() && slot.use_count() == 1 && !slot.requires_grad() && slot.shape() == t.shape() &&
            slot.numel() == t.numel() && t.numel() > 0) {
            auto dst = slot.mutable_data();
            std::copy(t.data().begin(), t.data().end(), dst.begin());
        } else {
            slot = store(t);
        }
    }

    void push_frame(const Tensor& k, const Tensor& v) {
        if (active_frames_ == 0) return;
        if (count_ == active_frames_) evict_oldest();
        auto& e = slots_[(head_ + count_) % slots_.size()];
        assign(e.keys, k);
        assign(e.values, v);
        ++count_;
    }

    void evict_oldest() {
        auto& e = slots_[head_];
        // Drop graph references so the evicted frame's autograd history is released.
        if (e.keys.requires_grad()) e.keys = Tensor::zeros(e.keys.shape());
        if (e.values.requires_grad()) e.values = Tensor::zeros(e.values.shape());
        head_ = (head_ + 1) % slots_.size();
        --count_;
    }

    std::vector<double> flatten(Tensor Entry::*member) const {
        std::vector<double> out;
        for (const auto& e : live()) out.insert(out.end(), (e.*member).values().begin(), (e.*member).values().end());
        return out;
    }

    static std::vector<double> flatten_range(const std::vector<Entry>& es, Tensor Entry::*member) {
        std::vector<double> out;
        for (const auto& e : es) out.insert(out.end(), (e.*member).values().begin(), (e.*member).values().end());
        return out;
    }

    std::vector<double> window_flat(Tensor Entry::*member) const {
        std::vector<double> out;
        for (std::size_t i = 0; i < count_; ++i) {
            const auto& t = slots_[(head_ + i) % slots_.size()].*member;
            out.insert(out.end(), t.values().begin(), t.values().end());
        }
        return out;
    }

    CacheConfig cfg_;
    std::vector<Entry> sink_;
    std::size_t sink_count_ = 0;
    bool sealed_ = false;
    std::vector<Entry> slots_;
    std::size_t head_ = 0;
    std::size_t count_ = 0;  // frames
    std::size_t active_frames_ = 0;
    std::size_t visible_frames_ = 0;
    mutable std::shared_ptr<const HeadContext> memo_;
    std::uint64_t total_appended_ = 0;
};

/// Per-layer caches for one rollout session.
class KVCache {
public:
    static constexpr std::uint32_t kVersion = 1;

    KVCache() = default;
    explicit KVCache(const CacheConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        layers_.assign(cfg.layers, KVLayerCache(cfg));
    }

    KVLayerCache& layer(std::size_t l) { return layers_.at(l); }
    const KVLayerCache& layer(std::size_t l) const { return layers_.at(l); }
    std::size_t num_layers() const { return layers_.size(); }
    const CacheConfig& config() const { return cfg_; }

    void set_window_tokens(std::size_t w) {
        for (auto& l : layers_) l.set_window_tokens(w);
    }

    void set_visible_tokens(std::size_t w) {
        for (auto& l : layers_) l.set_visible_tokens(w);
    }

    std::size_t live_tokens() const { return layers_.empty() ? 0 : layers_.front().live_tokens(); }
    std::size_t stored_tokens() const { return layers_.empty() ? 0 : layers_.front().stored_tokens(); }

    std::size_t allocated_bytes() const {
        std::size_t b = 0;
        for (const auto& l : layers_) b += l.allocated_bytes();
        return b;
    }

    /// EWKV: magic, version u32, S u32, W_max u32, frame_tokens u32, layers u32, model_dim u32,
    /// then per layer (sink n u32, window n u32, active W u32, visible W u32, sealed u32, total u64,
    /// sink K, sink V, window K, window V as little-endian f64).
    void write(std::ostream& os) const {
        io::write_magic(os, "EWKV");
        io::write_u32(os, kVersion);
        io::write_u32(os, static_cast<std::uint32_t>(cfg_.sink_tokens));
        io::write_u32(os, static_cast<std::uint32_t>(cfg_.max_window_tokens));
        io::write_u32(os, static_cast<std::uint32_t>(cfg_.frame_tokens));
        io::write_u32(os, static_cast<std::uint32_t>(cfg_.layers));
        io::write_u32(os, static_cast<std::uint32_t>(cfg_.model_dim));
        for (const auto& l : layers_) l.write(os);
    }

    static KVCache read(std::istream& is) {
        io::expect_magic(is, "EWKV");
        if (io::read_u32(is) != kVersion) throw FormatError("unsupported EWKV version");
        CacheConfig cfg;
        cfg.sink_tokens = io::read_u32(is);
        cfg.max_window_tokens = io::read_u32(is);
        cfg.frame_tokens = io::read_u32(is);
        cfg.layers = io::read_u32(is);
        cfg.model_dim = io::read_u32(is);
        KVCache c(cfg);
        for (auto& l : c.layers_) l.read(is);
        return c;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("cannot open " + path + " for writing");
        write(os);
    }

    static KVCache load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("cannot open " + path);
        return read(is);
    }

private:
    CacheConfig cfg_;
    std::vector<KVLayerCache> layers_;
};

/// Projections of the current chunk's tokens, un-rotated, [tokens x model_dim] each.
struct QueryBlock {
    Tensor q, k, v;
};

struct AttendResult {
    Tensor output;                    // [tokens x model_dim]
    std::size_t tokens_attended = 0;  // live cache tokens + block tokens
    std::vector<Tensor> probs;        // per head, filled only on request
};

/// softmax(Q'K'^T / sqrt(head_dim) + block-causal mask) V over [cache || block].
inline AttendResult attend_detailed(const QueryBlock& block, const KVLayerCache& cache, const AttentionConfig& cfg,
                                    bool keep_probs = false) {
    cfg.validate();
    const std::size_t D = cfg.model_dim, hd = cfg.head_dim();
    const std::size_t T = block.q.rank() == 2 ? block.q.dim(0) : 0;
    const std::size_t n_live = cache.live_tokens();
    if (T == 0 && n_live == 0) throw StateError("attend: empty cache with empty query block");
    if (block.q.rank() != 2 || block.q.dim(1) != D || block.k.shape() != block.q.shape() ||
        block.v.shape() != block.q.shape())
        throw DimensionError("attend: query block must be three [tokens x " + std::to_string(D) + "] tensors");
    if (cache.config().model_dim != D) throw ConfigError("attend: cache model_dim differs from attention config");

    AttendResult res;
    res.tokens_attended = n_live + T;
    if (T == 0) {
        res.output = Tensor::zeros({0, D});
        return res;
    }

    const auto& ctx = cache.head_context(cfg.n_heads, hd, cfg.rope_base);

    std::vector<std::int64_t> qpos(T);
    for (std::size_t i = 0; i < T; ++i) qpos[i] = static_cast<std::int64_t>(n_live + i);

    const RotaryEmbedding rope = cfg.rope();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        // The block's own keys sit at the same positions as its queries.
        const Tensor qh = rope_rotate(columns(block.q, h * hd, hd), qpos, rope);
        const Tensor bk = rope_rotate(columns(block.k, h * hd, hd), qpos, rope);
        const Tensor bv = columns(block.v, h * hd, hd);
        const Tensor kh = n_live ? concat_rows({ctx.k[h], bk}) : bk;
        const Tensor vh = n_live ? concat_rows({ctx.v[h], bv}) : bv;
        const Tensor p = causal_softmax(matmul_nt(qh, kh), inv_sqrt, n_live);
        if (keep_probs) res.probs.push_back(p);
        heads.push_back(matmul(p, vh));
    }
    res.output = cfg.n_heads == 1 ? heads.front() : concat_cols(heads);
    return res;
}

inline Tensor attend(const QueryBlock& block, const KVLayerCache& cache, const AttentionConfig& cfg) {
    return attend_detailed(block, cache, cfg).output;
}

}  // namespace ew
