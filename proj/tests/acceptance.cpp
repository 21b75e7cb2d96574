// End-to-end acceptance run. One PASS/FAIL line per criterion; exit status is nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>

#include "ew/config.hpp"
#include "ew/verify.hpp"

using namespace ew;

namespace {

int failures = 0;

void report(int n, const std::string& title, bool ok, const std::string& detail) {
    std::printf("AC%d %s %s: %s\n", n, ok ? "PASS" : "FAIL", title.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

// Folds a property suite into one line, naming the first failing check.
void report_suite(int n, const std::string& title, const SuiteResult& r) {
    std::size_t passed = 0;
    std::string first_fail;
    for (const auto& c : r) {
        if (c.passed)
            ++passed;
        else if (first_fail.empty())
            first_fail = c.name + (c.detail.empty() ? "" : " [" + c.detail + "]");
    }
    std::string detail = std::to_string(passed) + "/" + std::to_string(r.size()) + " checks";
    if (!first_fail.empty()) detail += "; first failure: " + first_fail;
    report(n, title, !r.empty() && passed == r.size(), detail);
}

std::string fmt(const char* f, double v) { return verify_detail::fmt(f, v); }

void detach_wall_criterion() {
    const auto s = detach_wall(200, 1);
    const bool ok = s.detached_nonzero == 0 && s.baseline_positive * 100 >= s.steps * 95 && s.seconds < 120.0;
    report(1, "detach wall", ok,
           "detached nonzero steps " + std::to_string(s.detached_nonzero) + "/" + std::to_string(s.steps) +
               ", baseline positive " + std::to_string(s.baseline_positive) + "/" + std::to_string(s.steps) + ", " +
               fmt("%.1f", s.seconds) + " s");
}

void cache_criterion() {
    const auto s = cache_equivalence(100, 2024);
    report(3, "cache equivalence", s.configs == 100 && s.max_abs_diff < 1e-9,
           std::to_string(s.configs) + " configs, max abs diff " + verify_detail::sci(s.max_abs_diff));
}

void dmd_criterion() {
    GaussianDmdResult toy;
    double toy_seconds = 0.0;
    const auto r = verify_dmd(&toy, &toy_seconds);
    report_suite(6, "DMD toy convergence", r);
    if (toy_seconds >= 60.0) report(6, "DMD toy runtime", false, fmt("%.1f s", toy_seconds));
    std::printf("    toy KL %s, mean %s, %s s\n", verify_detail::sci(toy.final_kl).c_str(), fmt("%.4f", toy.mean).c_str(),
                fmt("%.2f", toy_seconds).c_str());
}

void streaming_criterion() {
    const auto s = stream_bench(512, 7, 7);
    const bool bounded = s.max_live <= s.bound && s.sink_always_present;
    const bool flat = s.ratio <= 1.5;
    const bool memory = s.bytes_cv < 0.01;
    const bool fast = s.seconds < 300.0;
    report(8, "bounded streaming", bounded && flat && memory && fast,
           "live max " + std::to_string(s.max_live) + " <= " + std::to_string(s.bound) + (bounded ? "" : " VIOLATED") +
               "; last-quartile p95 / first-quartile median " + fmt("%.3f", s.ratio) + " (" +
               fmt("%.2f", s.last_quartile_p95_ms) + " / " + fmt("%.2f", s.first_quartile_median_ms) +
               " ms, single run " + fmt("%.3f", s.single_run_ratio) + ")" + (flat ? "" : " > 1.5") +
               "; cache bytes cv " + verify_detail::sci(s.bytes_cv) + "; " + std::to_string(s.chunks) + " chunks x " +
               std::to_string(s.repeats) + " in " + fmt("%.1f", s.seconds) + " s");
}

void resume_criterion() {
    const auto path = (std::filesystem::temp_directory_path() / "ew_acceptance_resume.ewst").string();
    bool ok = true;
    std::string detail;
    for (std::uint64_t split : {1u, 2u, 3u, 20u, 21u, 22u, 40u, 63u}) {
        const auto r = resume_equivalence(96, split, 5, path);
        ok = ok && r.identical;
        detail += (detail.empty() ? "" : " ") + std::to_string(split) + (r.identical ? ":ok" : ":DIFF");
    }
    report(9, "resumability", ok, "96 latents, splits " + detail);
}

void lambda_criterion() {
    bool exact = true;
    for (double lambda : {0.0, 0.05, 0.1, 0.3, 1.0, 2.5}) {
        auto gen = Tensor::from({}, {0.7}, true), l3d = Tensor::from({}, {0.4}, true);
        backward(total_loss(gen, l3d, LossWeights{lambda}));
        exact = exact && l3d.grad()[0] == lambda && gen.grad()[0] == 1.0;
    }
    // Default from a config file with nothing set, through the trainer.
    const auto cfg = load_config("", {}, nullptr);
    const bool defaults = cfg.train.lambda_3d == 0.1 && cfg.train.enable_l3d && to_json(cfg)["loss"]["lambda_3d"] == 0.1;
    TrainConfig tc = cfg.train;
    tc.steps = 3;
    ModelConfig mc = cfg.model;
    mc.generator.layers = 1;
    Trainer tr(tc, mc, cfg.seed);
    bool flows = true;
    for (int i = 0; i < 3; ++i) {
        const auto r = tr.step();
        flows = flows && r.loss_3d > 0.0 && r.loss_total == r.loss_gen + 0.1 * r.loss_3d;
    }
    report(10, "lambda linearity", exact && defaults && flows,
           std::string("dL/dL3D == lambda ") + (exact ? "exact" : "MISMATCH") + ", default 0.1 " +
               (defaults ? "loaded" : "MISSING") + ", trainer total == gen + 0.1*l3d " + (flows ? "exact" : "MISMATCH"));
}

}  // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    detach_wall_criterion();
    report_suite(2, "gradient fidelity", verify_grads(1e-5, 1e-4));
    cache_criterion();
    report_suite(4, "rope relative position", verify_rope());
    report_suite(5, "zero-conv identity", verify_fusion());
    dmd_criterion();
    report_suite(7, "schedule arithmetic", verify_schedule());
    streaming_criterion();
    resume_criterion();
    lambda_criterion();
    std::printf("%s: %d failing, %.1f s total\n", failures ? "FAILED" : "ALL PASSED", failures,
                verify_detail::seconds_since(t0));
    return failures ? 1 : 0;
}
