// ew: train, roll out, verify and benchmark the streaming video generator.
//
// Exit codes: 0 ok, 1 runtime failure (e.g. NaN abort), 2 usage/config error, 3 missing nets.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "ew/ew.hpp"

namespace fs = std::filesystem;
using namespace ew;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNoNets = 3;

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

struct MissingNets : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigArgs {
    std::string path;
    std::vector<std::string> sets;

    void attach(CLI::App* app) {
        app->add_option("-c,--config", path, "JSON config file (defaults when omitted)");
        app->add_option("--set", sets, "override a config key, e.g. --set train.steps=50")->take_all();
    }
    RunConfig load() const { return load_config(path, sets); }
};

Nets load_nets(const RunConfig& cfg) {
    for (const auto& p : {cfg.generator_path(), cfg.fusion_path()})
        if (!fs::exists(p)) throw MissingNets("trained nets not found: " + p + " (run `ew train` first)");
    auto gen = GeneratorNet::load(cfg.generator_path());
    auto fus = FusionNet::load(cfg.fusion_path());
    if (!(gen.config() == cfg.model.generator) || !(fus.config() == cfg.model.fusion()))
        throw ConfigError("nets in " + cfg.out_dir + " were trained with a different model config");
    return Nets(std::move(gen), std::move(fus), cfg.model);
}

void save_nets(const Nets& nets, const RunConfig& cfg, std::uint64_t hash) {
    nets.gen.save(cfg.generator_path(), hash);
    nets.fusion.save(cfg.fusion_path(), hash);
}

int cmd_train(const RunConfig& cfg, bool drift, std::size_t drift_chunks) {
    const auto hash = config_hash(cfg);
    fs::create_directories(cfg.out_dir);
    std::ofstream jsonl(cfg.train_report_path(), std::ios::trunc);
    if (!jsonl) throw ConfigError("cannot write " + cfg.train_report_path());
    if (drift) {
        auto det = cfg.train, base = cfg.train;
        det.detach_conditioning = true;
        base.detach_conditioning = false;
        const auto rep = drift_experiment(det, base, cfg.model, cfg.seed, drift_chunks, [&](bool d, const StepReport& r) {
            auto j = to_json(r, hash);
            j["detach_conditioning"] = d;
            jsonl << j.dump() << '\n' << std::flush;
        });
        const auto path = cfg.out_dir + "/drift.json";
        std::ofstream(path) << to_json(rep, hash).dump(2) << '\n';
        std::cout << "drift report written to " << path << "\n";
        return 0;
    }
    Trainer tr(cfg.train, cfg.model, cfg.seed);
    train(tr, [&](const StepReport& r) {
        jsonl << to_json(r, hash).dump() << '\n' << std::flush;
        if (r.step % 10 == 0 || r.step + 1 == cfg.train.steps)
            std::cout << "step " << r.step << " loss " << r.loss_total << " (gen " << r.loss_gen << ", 3d " << r.loss_3d
                      << ")\n";
    });
    save_nets(tr.nets(), cfg, hash);
    std::cout << "nets written to " << cfg.out_dir << " (config " << hash_hex(hash) << ")\n";
    return 0;
}

/// Drops stream records written after the snapshot so the file and the state agree.
void truncate_stream(const std::string& path, std::uint64_t latents, const GeneratorConfig& g) {
    const std::uint64_t header = 4 + 4 + 8;
    const std::uint64_t record = 8 + 4 * 4 + 8 * g.frame_sites();
    const auto want = header + latents * record;
    if (fs::file_size(path) < want)
        throw FormatError("stream file " + path + " holds fewer latents than the snapshot expects");
    fs::resize_file(path, want);
}

int cmd_rollout(const RunConfig& cfg, std::optional<std::uint64_t> latents, std::size_t snapshot_every, bool resume) {
    const auto hash = config_hash(cfg);
    const Nets nets = load_nets(cfg);
    RolloutState state;
    if (resume) {
        if (!fs::exists(cfg.snapshot_path())) throw ConfigError("no snapshot to resume from: " + cfg.snapshot_path());
        std::uint64_t h = 0;
        state = RolloutState::load(cfg.snapshot_path(), &h);
        if (h != hash) throw ConfigError("snapshot " + cfg.snapshot_path() + " was written under a different config");
        truncate_stream(cfg.stream_path(), state.latents_emitted, cfg.model.generator);
    } else {
        state = RolloutState::fresh(cfg.model.generator, cfg.schedule, cfg.seed);
    }
    LatentStreamWriter writer(cfg.stream_path(), hash, resume);
    std::signal(SIGINT, on_sigint);
    StreamHooks hooks;
    hooks.stop = &g_stop;
    hooks.sink = [&](std::uint64_t c, const Tensor& f) { writer.write(c, f); };
    std::size_t since = 0;
    hooks.on_chunk = [&](const ChunkReport&, const RolloutState& s) {
        if (snapshot_every && ++since >= snapshot_every) {
            writer.flush();
            s.save(cfg.snapshot_path(), hash);
            since = 0;
        }
    };
    const auto rep = stream(nets, state, latents, hooks);
    writer.flush();
    state.save(cfg.snapshot_path(), hash);
    std::ofstream(cfg.stream_report_path()) << to_json(rep, hash).dump(2) << '\n';
    std::cout << (rep.stopped ? "stopped" : "done") << ": " << rep.latents_emitted << " latents this run, "
              << rep.total_latents << " total (" << rep.total_frames << " frames); snapshot " << cfg.snapshot_path()
              << "\n";
    return 0;
}

int cmd_verify(const std::string& suite) {
    std::vector<std::string> names;
    if (suite == "all")
        for (const auto& [n, f] : verify_suites()) names.push_back(n);
    else
        names.push_back(suite);
    bool ok = true;
    for (const auto& n : names) {
        for (const auto& c : verify_suites().at(n)()) {
            std::cout << (c.passed ? "PASS " : "FAIL ") << n << ": " << c.name;
            if (!c.detail.empty()) std::cout << " [" << c.detail << "]";
            std::cout << "\n";
            ok = ok && c.passed;
        }
    }
    return ok ? 0 : kExitRuntime;
}

int cmd_bench(const RunConfig& cfg, std::size_t chunks, std::string out) {
    const auto hash = config_hash(cfg);
    fs::create_directories(cfg.out_dir);
    if (out.empty()) out = cfg.bench_path();
    const bool trained = fs::exists(cfg.generator_path()) && fs::exists(cfg.fusion_path());
    const Nets nets = trained ? load_nets(cfg) : Nets(cfg.model, cfg.seed);
    auto state = RolloutState::fresh(cfg.model.generator, cfg.schedule, cfg.seed);

    std::ofstream csv(out, std::ios::trunc);
    if (!csv) throw ConfigError("cannot write " + out);
    csv << "config_hash,chunk,mode,wall_ms,live_tokens,cache_bytes,tokens_attended,feature_drift\n";
    // Generation stays on this thread; a second thread formats and writes rows.
    BoundedQueue<ChunkReport> q(64);
    std::vector<ChunkReport> all;
    std::thread writer([&] {
        while (auto c = q.pop()) {
            csv << hash_hex(hash) << ',' << c->index << ',' << to_string(c->mode) << ',' << c->wall_ms << ','
                << c->live_tokens << ',' << c->cache_bytes << ',' << c->tokens_attended << ',' << c->feature_drift
                << '\n';
            all.push_back(*c);
        }
    });
    std::signal(SIGINT, on_sigint);
    StreamHooks hooks;
    hooks.stop = &g_stop;
    hooks.on_chunk = [&](const ChunkReport& c, const RolloutState&) { q.push(c); };
    try {
        stream(nets, state, static_cast<std::uint64_t>(chunks) * kChunkLatents, hooks);
    } catch (...) {
        q.close();
        writer.join();
        throw;
    }
    q.close();
    writer.join();

    auto column = [&](auto get) {
        std::vector<double> v;
        for (const auto& c : all) v.push_back(static_cast<double>(get(c)));
        return v;
    };
    const auto wall = column([](const ChunkReport& c) { return c.wall_ms; });
    const auto live = column([](const ChunkReport& c) { return c.live_tokens; });
    const auto bytes = column([](const ChunkReport& c) { return c.cache_bytes; });
    const auto att = column([](const ChunkReport& c) { return c.tokens_attended; });
    const auto drift = column([](const ChunkReport& c) { return c.feature_drift; });
    for (const auto& [label, p] : {std::pair{"median", 0.5}, std::pair{"p95", 0.95}})
        csv << hash_hex(hash) << ',' << label << ",all," << percentile(wall, p) << ',' << percentile(live, p) << ','
            << percentile(bytes, p) << ',' << percentile(att, p) << ',' << percentile(drift, p) << '\n';

    const std::vector<double> warm(bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 4), bytes.end());
    std::cout << "chunks " << all.size() << ", median " << percentile(wall, 0.5) << " ms, p95 " << percentile(wall, 0.95)
              << " ms, flatness " << (wall.empty() ? 0.0 : quartile_ratio(wall)) << ", cache bytes cv "
              << coefficient_of_variation(warm) << (trained ? "" : " (random init)") << "\n"
              << "csv written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ew: streaming video generator toolkit"};
    app.require_subcommand(1);

    ConfigArgs train_cfg, roll_cfg, bench_cfg, dump_cfg;
    bool drift = false;
    std::size_t drift_chunks = 32;
    auto* train_cmd = app.add_subcommand("train", "train generator and fusion nets");
    train_cfg.attach(train_cmd);
    train_cmd->add_flag("--drift", drift, "train detached and baseline configs and report continuation drift");
    train_cmd->add_option("--drift-chunks", drift_chunks, "chunks scored by --drift")->check(CLI::PositiveNumber);

    std::uint64_t latents = 0;
    bool infinite = false, resume = false;
    std::size_t snapshot_every = 0;
    auto* roll_cmd = app.add_subcommand("rollout", "stream latents from trained nets");
    roll_cfg.attach(roll_cmd);
    auto* lat_opt = roll_cmd->add_option("--latents", latents, "number of latents to emit");
    auto* inf_opt = roll_cmd->add_flag("--infinite", infinite, "stream until interrupted");
    lat_opt->excludes(inf_opt);
    roll_cmd->add_option("--snapshot-every", snapshot_every, "also snapshot every K chunks");
    roll_cmd->add_flag("--resume", resume, "continue from the last snapshot");

    std::string suite;
    auto* verify_cmd = app.add_subcommand("verify", "run a property suite");
    std::vector<std::string> suite_names{"all"};
    for (const auto& [n, f] : verify_suites()) suite_names.push_back(n);
    verify_cmd->add_option("suite", suite, "grads | cache | rope | schedule | dmd | fusion | all")
        ->required()
        ->check(CLI::IsMember(suite_names));

    std::size_t chunks = 0;
    std::string bench_out;
    auto* bench_cmd = app.add_subcommand("bench", "per-chunk latency and memory of a rollout");
    bench_cfg.attach(bench_cmd);
    bench_cmd->add_option("--chunks", chunks, "chunks to generate")->required()->check(CLI::PositiveNumber);
    bench_cmd->add_option("-o,--out", bench_out, "CSV path (default <out_dir>/bench.csv)");

    auto* config_cmd = app.add_subcommand("config", "configuration utilities");
    config_cmd->require_subcommand(1);
    auto* dump_cmd = config_cmd->add_subcommand("dump", "print the full config with every default");
    dump_cfg.attach(dump_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*train_cmd) return cmd_train(train_cfg.load(), drift, drift_chunks);
        if (*roll_cmd) {
            if (!infinite && lat_opt->count() == 0) {
                std::cerr << "rollout: one of --latents N or --infinite is required\n";
                return kExitUsage;
            }
            return cmd_rollout(roll_cfg.load(), infinite ? std::nullopt : std::optional<std::uint64_t>(latents),
                               snapshot_every, resume);
        }
        if (*verify_cmd) return cmd_verify(suite);
        if (*bench_cmd) return cmd_bench(bench_cfg.load(), chunks, bench_out);
        if (*dump_cmd) {
            const auto cfg = dump_cfg.load();
            std::cout << dump(cfg) << "\n";
            std::cerr << "config hash " << hash_hex(config_hash(cfg)) << "\n";
            return 0;
        }
    } catch (const MissingNets& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNoNets;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
