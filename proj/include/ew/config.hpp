#pragma once

// Run configuration: one JSON file, every key explicit, unknown keys rejected.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ew/binary_io.hpp"
#include "ew/errors.hpp"
#include "ew/streamer.hpp"
#include "ew/trainer.hpp"

namespace ew {

using Json = nlohmann::json;

struct RunConfig {
    ModelConfig model;
    TrainConfig train;  // train.seed mirrors `seed`
    ScheduleConfig schedule;
    std::string out_dir = "runs/default";
    std::uint64_t seed = 0;

    std::string generator_path() const { return out_dir + "/generator.ewnt"; }
    std::string fusion_path() const { return out_dir + "/fusion.ewfu"; }
    std::string train_report_path() const { return out_dir + "/train.jsonl"; }
    std::string stream_path() const { return out_dir + "/stream.ewls"; }
    std::string snapshot_path() const { return out_dir + "/rollout.ewst"; }
    std::string stream_report_path() const { return out_dir + "/stream_report.json"; }
    std::string bench_path() const { return out_dir + "/bench.csv"; }

    void validate() const {
        model.generator.attention().validate();
        const auto& g = model.generator;
        if (g.patch == 0 || g.height % g.patch || g.width % g.patch)
            throw ConfigError("model.patch must divide height and width");
        if (g.layers == 0 || g.denoise_steps == 0 || g.channels == 0) throw ConfigError("model sizes must be > 0");
        if (g.model_dim / g.heads % 2) throw ConfigError("attention head_dim must be even for rotary embedding");
        train.validate();
        schedule.validate();
    }
};

namespace config_detail {

// Field table shared by to_json and from_json so the two cannot drift apart.
template <class F>
void visit(RunConfig& c, F&& f) {
    auto& g = c.model.generator;
    f("model", "channels", g.channels);
    f("model", "height", g.height);
    f("model", "width", g.width);
    f("model", "patch", g.patch);
    f("model", "layers", g.layers);
    f("model", "mlp_dim", g.mlp_dim);
    f("model", "denoise_steps", g.denoise_steps);
    f("model", "text_dim", g.text_dim);
    f("model", "zero_init_output", g.zero_init_output);
    f("model", "text_tokens", c.model.text_tokens);
    f("model", "feature_channels", c.model.feature_channels);
    f("model", "text_seed", c.model.text_seed);
    f("attention", "heads", g.heads);
    f("attention", "model_dim", g.model_dim);
    f("attention", "rope_base", g.rope_base);
    f("loss", "lambda_3d", c.train.lambda_3d);
    f("loss", "enable_l3d", c.train.enable_l3d);
    f("train", "optimizer", c.train.optimizer);
    f("train", "lr", c.train.lr);
    f("train", "steps", c.train.steps);
    f("train", "batch_size", c.train.batch_size);
    f("train", "detach_conditioning", c.train.detach_conditioning);
    f("train", "dmd_schedule_points", c.train.dmd_schedule_points);
    f("train", "fake_score_ridge", c.train.fake_score_ridge);
    f("schedule", "sink_latents", c.schedule.sink_latents);
    f("schedule", "long_context", c.schedule.long_context);
    f("schedule", "long_generate", c.schedule.long_generate);
    f("schedule", "short_context", c.schedule.short_context);
    f("schedule", "short_generate", c.schedule.short_generate);
    f("schedule", "retain_context", c.schedule.retain_context);
    f("paths", "out_dir", c.out_dir);
    f("", "seed", c.seed);
}

template <class T>
void read_field(const Json& j, const std::string& key, T& dst) {
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!j.is_boolean()) throw ConfigError("");
        } else if constexpr (std::is_integral_v<T>) {
            if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0))
                throw ConfigError("");
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) throw ConfigError("");
        } else {
            if (!j.is_string()) throw ConfigError("");
        }
        dst = j.get<T>();
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type: " + j.dump());
    }
}

}  // namespace config_detail

inline Json to_json(const RunConfig& c) {
    Json j = Json::object();
    config_detail::visit(const_cast<RunConfig&>(c), [&](const char* sec, const char* key, auto& v) {
        if (*sec) j[sec][key] = v;
        else j[key] = v;
    });
    return j;
}

inline RunConfig from_json(const Json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    std::vector<std::string> known;
    config_detail::visit(c, [&](const char* sec, const char* key, auto& v) {
        const std::string path = *sec ? std::string(sec) + "." + key : std::string(key);
        known.push_back(path);
        if (*sec) {
            if (!j.contains(sec)) return;
            if (!j.at(sec).is_object()) throw ConfigError("config section '" + std::string(sec) + "' must be an object");
            if (j.at(sec).contains(key)) config_detail::read_field(j.at(sec).at(key), path, v);
        } else if (j.contains(key)) {
            config_detail::read_field(j.at(key), path, v);
        }
    });
    auto is_known = [&](const std::string& p) { return std::find(known.begin(), known.end(), p) != known.end(); };
    for (const auto& [k, v] : j.items()) {
        if (v.is_object()) {
            const bool section = std::any_of(known.begin(), known.end(),
                                             [&](const std::string& p) { return p.rfind(k + ".", 0) == 0; });
            if (!section) throw ConfigError("unknown config section '" + k + "'");
            for (const auto& [k2, v2] : v.items())
                if (!is_known(k + "." + k2)) throw ConfigError("unknown config key '" + k + "." + k2 + "'");
        } else if (!is_known(k)) {
            throw ConfigError("unknown config key '" + k + "'");
        }
    }
    c.train.seed = c.seed;
    return c;
}

/// Canonical form: sorted keys, every default present.
inline std::string dump(const RunConfig& c, int indent = 2) { return to_json(c).dump(indent); }

/// Hash of everything except output paths, so a run directory can move without
/// changing the identity of what was computed.
inline std::uint64_t config_hash(const RunConfig& c) {
    Json j = to_json(c);
    j.erase("paths");
    return io::fnv1a(j.dump());
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Applies "section.key=value" overrides. The value is parsed as JSON when possible,
/// otherwise taken as a string.
inline void apply_overrides(Json& j, const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + s + "' is not key=value");
        const std::string key = s.substr(0, eq), raw = s.substr(eq + 1);
        Json val = Json::parse(raw, nullptr, false);
        if (val.is_discarded()) val = raw;
        const auto dot = key.find('.');
        if (dot == std::string::npos) {
            j[key] = val;
        } else {
            const std::string sec = key.substr(0, dot);
            if (j.contains(sec) && !j[sec].is_object()) throw ConfigError("config section '" + sec + "' must be an object");
            j[sec][key.substr(dot + 1)] = val;
        }
    }
}

/// Parses an EW_SEED value; empty or absent means no override.
inline std::optional<std::uint64_t> seed_from_env(const char* v) {
    if (!v || !*v) return std::nullopt;
    char* end = nullptr;
    errno = 0;
    const auto s = std::strtoull(v, &end, 10);
    if (errno || *end || *v == '-') throw ConfigError(std::string("EW_SEED='") + v + "' is not a non-negative integer");
    return s;
}

/// Loads `path` (empty = defaults), applies overrides, then EW_SEED, then validates.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& sets = {},
                             const char* env_seed = std::getenv("EW_SEED")) {
    Json j = Json::object();
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config file " + path);
        j = Json::parse(is, nullptr, false);
        if (j.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
    }
    apply_overrides(j, sets);
    RunConfig c = from_json(j);
    if (const auto s = seed_from_env(env_seed)) c.seed = c.train.seed = *s;
    c.validate();
    return c;
}

}  // namespace ew
