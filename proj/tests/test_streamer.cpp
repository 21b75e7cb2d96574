#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "ew/bounded_queue.hpp"
#include "ew/streamer.hpp"
#include "ew/verify.hpp"

using namespace ew;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("ew_test_" + name)).string();
}

struct Collected {
    std::vector<std::uint64_t> chunks;
    std::vector<std::vector<double>> frames;

    StreamHooks hooks() {
        StreamHooks h;
        h.sink = [this](std::uint64_t c, const Tensor& f) {
            chunks.push_back(c);
            frames.push_back(f.values());
        };
        return h;
    }
};

const ModelConfig kModel{};

}  // namespace

TEST(Schedule, StrictAlternationLongFirst) {
    RolloutState s;
    std::vector<ContextMode> modes;
    for (int i = 0; i < 5; ++i) modes.push_back(next_phase(s).mode);
    EXPECT_EQ(modes, (std::vector<ContextMode>{ContextMode::LongContext, ContextMode::ShortContext,
                                               ContextMode::LongContext, ContextMode::ShortContext,
                                               ContextMode::LongContext}));
    EXPECT_EQ(s.phases_started, 5u);
}

TEST(Schedule, DefaultBudgets) {
    const ScheduleConfig sc;
    EXPECT_EQ(sc.phase(ContextMode::LongContext).context_latents, 18u);
    EXPECT_EQ(sc.phase(ContextMode::LongContext).generate_latents, 3u);
    EXPECT_EQ(sc.phase(ContextMode::ShortContext).context_latents, 3u);
    EXPECT_EQ(sc.phase(ContextMode::ShortContext).generate_latents, 18u);
    EXPECT_EQ(sc.max_window_latents(), 17u);
}

TEST(Schedule, InvalidBudgetsRejected) {
    ScheduleConfig sc;
    sc.long_generate = 4;
    EXPECT_THROW(sc.validate(), ConfigError);
    sc = ScheduleConfig{};
    sc.short_context = 1;
    EXPECT_THROW(sc.validate(), ConfigError);
    sc = ScheduleConfig{};
    sc.sink_latents = 0;
    EXPECT_THROW(sc.validate(), ConfigError);
}

TEST(Stream, EmitsExactlyTheRequestedLatents) {
    const Nets nets(kModel, 1);
    for (std::uint64_t n : {0u, 1u, 3u, 4u, 42u}) {
        auto st = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
        Collected c;
        const auto rep = stream(nets, st, n, c.hooks());
        EXPECT_EQ(c.frames.size(), n);
        EXPECT_EQ(rep.latents_emitted, n);
        EXPECT_EQ(rep.total_frames, n ? frames_for_latents(n) : 0u);
        EXPECT_EQ(rep.chunks.size(), (n + 2) / 3);
        EXPECT_EQ(st.pending.size(), rep.chunks.size() * 3 - n);
    }
}

TEST(Stream, ChunkIndicesAreSequential) {
    const Nets nets(kModel, 1);
    auto st = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    Collected c;
    stream(nets, st, 12, c.hooks());
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(c.chunks[i], i / 3);
}

TEST(Stream, PhasesFollowScheduleAndCacheStaysBounded) {
    const Nets nets(kModel, 1);
    auto st = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    std::vector<std::size_t> visible;
    StreamHooks h;
    h.on_chunk = [&](const ChunkReport&, const RolloutState& s) {
        visible.push_back(s.gen.cache.live_tokens());
        EXPECT_EQ(s.gen.cache.layer(0).sink_count(), kModel.generator.tokens_per_frame());
    };
    const auto rep = stream(nets, st, 63, h);  // three full cycles
    ASSERT_EQ(rep.chunks.size(), 21u);
    const std::size_t tpf = kModel.generator.tokens_per_frame();
    for (std::size_t i = 0; i < rep.chunks.size(); ++i) {
        const bool long_phase = i % 7 == 0;
        EXPECT_EQ(rep.chunks[i].mode, long_phase ? ContextMode::LongContext : ContextMode::ShortContext) << i;
        EXPECT_LE(visible[i], (long_phase ? 18u : 3u) * tpf) << i;
    }
    EXPECT_LE(rep.max_live_tokens, rep.live_token_bound);
    EXPECT_EQ(rep.live_token_bound, 18u * tpf);
    // A long phase after a short one sees the full 17-latent window it retained.
    EXPECT_EQ(rep.chunks[7].tokens_attended, 18 * tpf + 3 * tpf);
}

TEST(Stream, EagerTrimVariantEvicts) {
    const Nets nets(kModel, 1);
    ScheduleConfig sc;
    sc.retain_context = false;
    auto eager = RolloutState::fresh(kModel.generator, sc, 2);
    auto retained = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    const auto a = stream(nets, eager, 24, {}), b = stream(nets, retained, 24, {});
    const std::size_t tpf = kModel.generator.tokens_per_frame();
    // short context plus the chunk just committed
    EXPECT_LE(a.chunks.back().live_tokens, (3u + 3u) * tpf);
    EXPECT_LT(a.chunks.back().live_tokens, b.chunks.back().live_tokens);
}

TEST(Stream, InfiniteNeedsStopSignal) {
    const Nets nets(kModel, 1);
    auto st = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    EXPECT_THROW(stream(nets, st, std::nullopt, {}), ConfigError);
}

TEST(Stream, StopsAtChunkBoundary) {
    const Nets nets(kModel, 1);
    auto st = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    std::atomic<bool> stop{false};
    StreamHooks h;
    h.stop = &stop;
    h.on_chunk = [&](const ChunkReport& c, const RolloutState&) {
        if (c.index == 4) stop = true;
    };
    const auto rep = stream(nets, st, std::nullopt, h);
    EXPECT_TRUE(rep.stopped);
    EXPECT_EQ(rep.chunks.size(), 5u);
    EXPECT_EQ(rep.latents_emitted, 15u);
}

TEST(Stream, SnapshotRestoreIsBitExact) {
    for (std::uint64_t split : {1u, 20u, 21u, 25u}) {
        const auto r = resume_equivalence(48, split, 3, temp_path("resume.ewst"));
        EXPECT_TRUE(r.identical) << "split " << split;
        EXPECT_EQ(r.latents, 48u);
    }
}

TEST(Stream, SnapshotPreservesState) {
    const Nets nets(kModel, 1);
    auto st = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    stream(nets, st, 10, {});
    const auto path = temp_path("state.ewst");
    st.save(path, 0x1234);
    std::uint64_t h = 0;
    const auto back = RolloutState::load(path, &h);
    std::filesystem::remove(path);
    EXPECT_EQ(h, 0x1234u);
    EXPECT_EQ(back.latents_emitted, 10u);
    EXPECT_EQ(back.pending.size(), 2u);
    EXPECT_EQ(back.phases_started, st.phases_started);
    EXPECT_EQ(back.chunks_left_in_phase, st.chunks_left_in_phase);
    EXPECT_EQ(back.mode, st.mode);
    EXPECT_EQ(back.schedule, st.schedule);
    EXPECT_EQ(back.gen.chunks_done, st.gen.chunks_done);
    EXPECT_EQ(back.gen.cache.layer(1).live_key_values(), st.gen.cache.layer(1).live_key_values());
    EXPECT_THROW(RolloutState::load(path), FormatError);
}

TEST(LatentFile, WriteReadAndAppend) {
    const auto path = temp_path("stream.ewls");
    Rng rng(5);
    const auto a = Tensor::randn({2, 3, 3, 1}, rng), b = Tensor::randn({2, 3, 3, 1}, rng);
    {
        LatentStreamWriter w(path, 77);
        w.write(0, a);
        EXPECT_THROW(w.write(0, Tensor::zeros({2, 3})), DimensionError);
    }
    {
        LatentStreamWriter w(path, 77, true);
        w.write(1, b);
    }
    EXPECT_THROW(LatentStreamWriter(path, 78, true), FormatError);
    const auto f = read_latent_stream(path);
    std::filesystem::remove(path);
    EXPECT_EQ(f.config_hash, 77u);
    ASSERT_EQ(f.records.size(), 2u);
    EXPECT_EQ(f.records[1].chunk, 1u);
    EXPECT_EQ(f.records[1].dims, (std::array<std::uint32_t, 4>{2, 3, 3, 1}));
    EXPECT_EQ(f.records[1].payload, b.values());
    EXPECT_THROW(LatentStreamWriter(path, 77, true), FormatError);
}

TEST(BoundedQueue, FifoAndCloseDrains) {
    BoundedQueue<int> q(3);
    EXPECT_TRUE(q.push(1));
    EXPECT_TRUE(q.push(2));
    q.close();
    EXPECT_FALSE(q.push(3));
    EXPECT_EQ(q.pop(), 1);
    EXPECT_EQ(q.pop(), 2);
    EXPECT_EQ(q.pop(), std::nullopt);
    EXPECT_THROW(BoundedQueue<int>(0), std::invalid_argument);
}

TEST(BoundedQueue, ProducerBlocksWhenFull) {
    BoundedQueue<int> q(2);
    std::atomic<int> pushed{0};
    std::thread producer([&] {
        for (int i = 0; i < 100; ++i) {
            q.push(i);
            ++pushed;
        }
        q.close();
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    EXPECT_LE(pushed.load(), 2);  // capacity reached, producer waiting
    std::vector<int> got;
    while (auto v = q.pop()) got.push_back(*v);
    producer.join();
    ASSERT_EQ(got.size(), 100u);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(got[i], i);
    EXPECT_EQ(q.high_water(), 2u);
}

TEST(BoundedQueue, StreamFeedsConsumerThread) {
    const Nets nets(kModel, 1);
    auto st = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    BoundedQueue<std::vector<double>> q(2);
    std::vector<std::vector<double>> consumed;
    std::thread consumer([&] {
        while (auto v = q.pop()) consumed.push_back(std::move(*v));
    });
    StreamHooks h;
    h.sink = [&](std::uint64_t, const Tensor& f) { q.push(f.values()); };
    stream(nets, st, 30, h);
    q.close();
    consumer.join();

    auto ref = RolloutState::fresh(kModel.generator, ScheduleConfig{}, 2);
    Collected c;
    stream(nets, ref, 30, c.hooks());
    EXPECT_EQ(consumed, c.frames);
    EXPECT_LE(q.high_water(), 2u);
}
