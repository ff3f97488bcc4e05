// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "febcache/analysis.hpp"
#include "febcache/analytic.hpp"
#include "febcache/cache.hpp"
#include "febcache/errors.hpp"
#include "febcache/sampler.hpp"
#include "febcache/schedule.hpp"
#include "febcache/tablegen.hpp"
#include "febcache/tensor_io.hpp"
#include "febcache/toy_dit.hpp"

namespace febcache {

inline constexpr int kConfigSchemaVersion = 1;

struct PriorComponentSpec {
    double weight = 1.0;
    double mean = 0.0;  // constant mean field
    double variance = 1.0;
};

struct PriorSpec {
    std::string kind = "gaussian";  // gaussian | point-mass | mixture
    // gaussian: components[0]; point-mass: value or seed; mixture: components
    std::vector<PriorComponentSpec> components{PriorComponentSpec{}};
    double value = 0.0;
    std::optional<std::uint64_t> seed;
};

struct ModelSpec {
    std::string kind = "toy-dit";  // toy-dit | analytic
    ToyDiTConfig toy{};
    std::optional<std::filesystem::path> weights;
    PriorSpec prior{};
    double band_cutoff = kDefaultBandCutoff;

    Shape grid() const { return toy.grid; }
};

struct PolicySpec {
    std::string kind = "no-cache";  // no-cache | interval-both | interval-separate | table
    int n = 1;
    int n_attn = 1;
    int n_mlp = 1;
    std::filesystem::path table_path;
};

struct RunConfig {
    ModelSpec model{};
    int T = 50;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    SamplerSpec sampler{};
    PolicySpec policy{};
    bool scaling_enabled = true;
    ScalingSchedule scaling{};
    int tablegen_n = 8;
    ThresholdSchedule threshold{};
    double stage_boundary = 0.4;
    std::uint64_t seed_base = 0;
    int seed_count = 1;
    unsigned threads = 1;
    int snapshot_stride = 1;
    std::filesystem::path output_dir = "out";

    NoiseSchedule schedule() const { return build_linear_schedule(T, beta_start, beta_end); }
    std::optional<ScalingSchedule> scaling_or_none() const {
        return scaling_enabled ? std::optional(scaling) : std::nullopt;
    }
    TableGenConfig tablegen() const {
        TableGenConfig c;
        c.samples = tablegen_n;
        c.scaling = scaling;
        c.threshold = threshold;
        c.stage_boundary = stage_boundary;
        c.sampler = sampler;
        c.seed = seed_base;
        return c;
    }
};

// ---------------------------------------------------------------------------
// JSON <-> RunConfig
// ---------------------------------------------------------------------------

namespace detail {

[[noreturn]] inline void config_error(const std::string& where, const std::string& what) {
    throw std::invalid_argument("config " + where + ": " + what);
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        config_error(where + "." + key, "has the wrong type");
    }
}

/// Numbers may also be spelled "inf" for threshold intercepts.
inline double get_real(const nlohmann::json& j, const char* key, double fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (v.is_string() && (v == "inf" || v == "+inf")) return std::numeric_limits<double>::infinity();
    if (!v.is_number()) config_error(where + "." + key, "must be a number");
    return v.get<double>();
}

inline const nlohmann::json& object_or_empty(const nlohmann::json& j, const char* key) {
    static const nlohmann::json empty = nlohmann::json::object();
    if (!j.contains(key)) return empty;
    if (!j.at(key).is_object()) config_error(key, "must be an object");
    return j.at(key);
}

inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) config_error(where, "unknown key \"" + key + "\"");
    }
}

inline std::filesystem::path resolve_path(const std::string& p, const std::filesystem::path& base) {
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

inline Shape parse_grid(const nlohmann::json& j, Shape fallback, const std::string& where) {
    if (!j.contains("grid")) return fallback;
    const auto& g = j.at("grid");
    if (!g.is_array() || g.size() != 3) config_error(where + ".grid", "must be [H, W, C]");
    for (const auto& d : g) {
        if (!d.is_number_integer() || d.get<long long>() < 1) config_error(where + ".grid", "entries must be >= 1");
    }
    return {g[0].get<std::size_t>(), g[1].get<std::size_t>(), g[2].get<std::size_t>()};
}

inline PriorSpec parse_prior(const nlohmann::json& j) {
    const std::string where = "model.prior";
    require_keys(j, {"kind", "mean", "variance", "value", "seed", "components"}, where);
    PriorSpec p;
    p.kind = get_or<std::string>(j, "kind", "gaussian", where);
    if (p.kind == "gaussian") {
        p.components = {{1.0, get_real(j, "mean", 0.0, where), get_real(j, "variance", 1.0, where)}};
    } else if (p.kind == "point-mass") {
        p.components = {{1.0, 0.0, 0.0}};
        p.value = get_real(j, "value", 0.0, where);
        if (j.contains("seed")) p.seed = get_or<std::uint64_t>(j, "seed", 0, where);
    } else if (p.kind == "mixture") {
        if (!j.contains("components") || !j["components"].is_array() || j["components"].empty()) {
            config_error(where + ".components", "must be a non-empty array");
        }
        p.components.clear();
        for (const auto& c : j["components"]) {
            require_keys(c, {"weight", "mean", "variance"}, where + ".components");
            p.components.push_back({get_real(c, "weight", 0.0, where), get_real(c, "mean", 0.0, where),
                                    get_real(c, "variance", 1.0, where)});
        }
    } else {
        config_error(where + ".kind", "unknown prior \"" + p.kind + "\"");
    }
    return p;
}

inline void parse_policy_into(const nlohmann::json& j, PolicySpec& p, const std::filesystem::path& base) {
    const std::string where = "policy";
    require_keys(j, {"kind", "N", "N_attn", "N_mlp", "path"}, where);
    p.kind = get_or<std::string>(j, "kind", p.kind, where);
    p.n = get_or<int>(j, "N", p.n, where);
    p.n_attn = get_or<int>(j, "N_attn", p.n_attn, where);
    p.n_mlp = get_or<int>(j, "N_mlp", p.n_mlp, where);
    if (j.contains("path")) p.table_path = resolve_path(get_or<std::string>(j, "path", "", where), base);
}

}  // namespace detail

/// Parses and validates a config object. Relative file references are
/// resolved against `base_dir` (the config file's directory).
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    using namespace detail;
    if (!j.is_object()) config_error("root", "must be a JSON object");
    require_keys(j,
                 {"schema_version", "model", "schedule", "sampler", "policy", "scaling", "tablegen", "seeds",
                  "threads", "snapshot_stride", "output_dir"},
                 "root");
    const int version = get_or<int>(j, "schema_version", kConfigSchemaVersion, "root");
    if (version != kConfigSchemaVersion) {
        config_error("schema_version", "unsupported version " + std::to_string(version));
    }
    RunConfig cfg;

    const auto& m = object_or_empty(j, "model");
    require_keys(m, {"kind", "grid", "patch", "d_model", "n_heads", "n_blocks", "seed", "weights", "prior",
                     "band_cutoff"},
                 "model");
    cfg.model.kind = get_or<std::string>(m, "kind", cfg.model.kind, "model");
    cfg.model.toy.grid = parse_grid(m, cfg.model.toy.grid, "model");
    if (cfg.model.kind == "toy-dit") {
        cfg.model.toy.patch = get_or<std::size_t>(m, "patch", cfg.model.toy.patch, "model");
        cfg.model.toy.d_model = get_or<std::size_t>(m, "d_model", cfg.model.toy.d_model, "model");
        cfg.model.toy.n_heads = get_or<std::size_t>(m, "n_heads", cfg.model.toy.n_heads, "model");
        cfg.model.toy.n_blocks = get_or<std::size_t>(m, "n_blocks", cfg.model.toy.n_blocks, "model");
        cfg.model.toy.seed = get_or<std::uint64_t>(m, "seed", cfg.model.toy.seed, "model");
        if (m.contains("weights")) cfg.model.weights = resolve_path(get_or<std::string>(m, "weights", "", "model"), base_dir);
        cfg.model.toy.validate();
    } else if (cfg.model.kind == "analytic") {
        cfg.model.prior = parse_prior(object_or_empty(m, "prior"));
        cfg.model.band_cutoff = get_real(m, "band_cutoff", cfg.model.band_cutoff, "model");
        check_cutoff(cfg.model.band_cutoff);
        const Shape g = cfg.model.grid();
        if (!is_power_of_two(g.height) || !is_power_of_two(g.width)) {
            config_error("model.grid", "analytic model needs power-of-two H and W");
        }
    } else {
        config_error("model.kind", "unknown model \"" + cfg.model.kind + "\"");
    }

    const auto& s = object_or_empty(j, "schedule");
    require_keys(s, {"T", "beta_start", "beta_end"}, "schedule");
    cfg.T = get_or<int>(s, "T", cfg.T, "schedule");
    cfg.beta_start = get_real(s, "beta_start", cfg.beta_start, "schedule");
    cfg.beta_end = get_real(s, "beta_end", cfg.beta_end, "schedule");
    if (cfg.T < 2) config_error("schedule.T", "must be >= 2");
    const NoiseSchedule schedule = cfg.schedule();  // validates the betas

    const auto& sm = object_or_empty(j, "sampler");
    require_keys(sm, {"kind", "steps"}, "sampler");
    const std::string kind = get_or<std::string>(sm, "kind", "ddpm", "sampler");
    if (kind == "ddpm") {
        cfg.sampler.kind = SamplerKind::Ddpm;
    } else if (kind == "ddim") {
        cfg.sampler.kind = SamplerKind::Ddim;
    } else {
        config_error("sampler.kind", "must be ddpm or ddim");
    }
    cfg.sampler.steps = get_or<int>(sm, "steps", 0, "sampler");
    if (cfg.sampler.steps < 0) config_error("sampler.steps", "must be >= 0");
    cfg.sampler.resolved_steps(schedule);

    parse_policy_into(object_or_empty(j, "policy"), cfg.policy, base_dir);
    if (cfg.policy.kind == "interval-both") {
        if (cfg.policy.n < 1) config_error("policy.N", "must be >= 1");
    } else if (cfg.policy.kind == "interval-separate") {
        if (cfg.policy.n_attn < 1 || cfg.policy.n_mlp < 1) config_error("policy", "N_attn and N_mlp must be >= 1");
    } else if (cfg.policy.kind == "table") {
        if (cfg.policy.table_path.empty()) config_error("policy.path", "is required for a table policy");
    } else if (cfg.policy.kind != "no-cache") {
        config_error("policy.kind", "unknown policy \"" + cfg.policy.kind + "\"");
    }

    const auto& sc = object_or_empty(j, "scaling");
    require_keys(sc, {"enabled", "b_h", "b_l", "t_thre"}, "scaling");
    cfg.scaling_enabled = get_or<bool>(sc, "enabled", cfg.scaling_enabled, "scaling");
    cfg.scaling.b_high = get_real(sc, "b_h", cfg.scaling.b_high, "scaling");
    cfg.scaling.b_low = get_real(sc, "b_l", cfg.scaling.b_low, "scaling");
    cfg.scaling.t_thre = get_real(sc, "t_thre", cfg.scaling.t_thre, "scaling");
    cfg.scaling.validate();

    const auto& tg = object_or_empty(j, "tablegen");
    require_keys(tg, {"n", "a", "b", "t_thre"}, "tablegen");
    cfg.tablegen_n = get_or<int>(tg, "n", cfg.tablegen_n, "tablegen");
    cfg.threshold.a = get_real(tg, "a", cfg.threshold.a, "tablegen");
    cfg.threshold.b = get_real(tg, "b", cfg.threshold.b, "tablegen");
    cfg.stage_boundary = get_real(tg, "t_thre", cfg.stage_boundary, "tablegen");
    if (std::isnan(cfg.threshold.a) || std::isnan(cfg.threshold.b)) config_error("tablegen", "a and b must be numbers");
    if (std::isinf(cfg.threshold.b)) config_error("tablegen.b", "must be finite");
    cfg.tablegen().validate();

    const auto& sd = object_or_empty(j, "seeds");
    require_keys(sd, {"base", "count"}, "seeds");
    cfg.seed_base = get_or<std::uint64_t>(sd, "base", cfg.seed_base, "seeds");
    cfg.seed_count = get_or<int>(sd, "count", cfg.seed_count, "seeds");
    if (cfg.seed_count < 1) config_error("seeds.count", "must be >= 1");

    const int threads = get_or<int>(j, "threads", 1, "root");
    if (threads < 1) config_error("threads", "must be >= 1");
    cfg.threads = static_cast<unsigned>(threads);
    cfg.snapshot_stride = get_or<int>(j, "snapshot_stride", cfg.snapshot_stride, "root");
    if (cfg.snapshot_stride < 0) config_error("snapshot_stride", "must be >= 0");
    if (j.contains("output_dir")) cfg.output_dir = get_or<std::string>(j, "output_dir", "out", "root");
    return cfg;
}

/// Canonical JSON form. Paths are written as given after resolution.
inline nlohmann::json to_json(const RunConfig& cfg) {
    nlohmann::json model;
    model["kind"] = cfg.model.kind;
    const Shape g = cfg.model.grid();
    model["grid"] = {g.height, g.width, g.channels};
    if (cfg.model.kind == "toy-dit") {
        model["patch"] = cfg.model.toy.patch;
        model["d_model"] = cfg.model.toy.d_model;
        model["n_heads"] = cfg.model.toy.n_heads;
        model["n_blocks"] = cfg.model.toy.n_blocks;
        model["seed"] = cfg.model.toy.seed;
        if (cfg.model.weights) model["weights"] = cfg.model.weights->string();
    } else {
        nlohmann::json prior{{"kind", cfg.model.prior.kind}};
        if (cfg.model.prior.kind == "gaussian") {
            prior["mean"] = cfg.model.prior.components.front().mean;
            prior["variance"] = cfg.model.prior.components.front().variance;
        } else if (cfg.model.prior.kind == "point-mass") {
            if (cfg.model.prior.seed) {
                prior["seed"] = *cfg.model.prior.seed;
            } else {
                prior["value"] = cfg.model.prior.value;
            }
        } else {
            prior["components"] = nlohmann::json::array();
            for (const auto& c : cfg.model.prior.components) {
                prior["components"].push_back({{"weight", c.weight}, {"mean", c.mean}, {"variance", c.variance}});
            }
        }
        model["prior"] = prior;
        model["band_cutoff"] = cfg.model.band_cutoff;
    }
    nlohmann::json policy{{"kind", cfg.policy.kind}};
    if (cfg.policy.kind == "interval-both") policy["N"] = cfg.policy.n;
    if (cfg.policy.kind == "interval-separate") {
        policy["N_attn"] = cfg.policy.n_attn;
        policy["N_mlp"] = cfg.policy.n_mlp;
    }
    if (cfg.policy.kind == "table") policy["path"] = cfg.policy.table_path.string();
    auto real = [](double v) -> nlohmann::json {
        if (std::isinf(v)) return "inf";
        return v;
    };
    return {{"schema_version", kConfigSchemaVersion},
            {"model", model},
            {"schedule", {{"T", cfg.T}, {"beta_start", cfg.beta_start}, {"beta_end", cfg.beta_end}}},
            {"sampler", {{"kind", to_string(cfg.sampler.kind)}, {"steps", cfg.sampler.steps}}},
            {"policy", policy},
            {"scaling",
             {{"enabled", cfg.scaling_enabled},
              {"b_h", cfg.scaling.b_high},
              {"b_l", cfg.scaling.b_low},
              {"t_thre", cfg.scaling.t_thre}}},
            {"tablegen",
             {{"n", cfg.tablegen_n}, {"a", real(cfg.threshold.a)}, {"b", cfg.threshold.b}, {"t_thre", cfg.stage_boundary}}},
            {"seeds", {{"base", cfg.seed_base}, {"count", cfg.seed_count}}},
            {"threads", cfg.threads},
            {"snapshot_stride", cfg.snapshot_stride},
            {"output_dir", cfg.output_dir.string()}};
}

/// Hash of everything that influences results. Thread count and output
/// location are excluded; a referenced table contributes its contents.
inline std::string config_hash(const RunConfig& cfg, const std::optional<CacheTable>& table = std::nullopt) {
    nlohmann::json j = to_json(cfg);
    j.erase("threads");
    j.erase("output_dir");
    if (table) {
        j["policy"].erase("path");
        j["policy"]["table"] = table_to_json(*table);
    }
    return fnv1a_hex(j.dump());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_json_file(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline GaussianMixturePrior make_prior(const ModelSpec& m) {
    const Shape shape = m.grid();
    GaussianMixturePrior prior;
    if (m.prior.kind == "point-mass") {
        Grid at(shape, m.prior.value);
        if (m.prior.seed) {
            SeededRng rng(*m.prior.seed, 0x9a55ULL);
            at = gaussian_sample(rng, shape);
        }
        return GaussianMixturePrior::point_mass(std::move(at));
    }
    for (const auto& c : m.prior.components) prior.components.push_back({c.weight, Grid(shape, c.mean), c.variance});
    prior.validate();
    return prior;
}

inline std::unique_ptr<NoisePredictor> make_predictor(const RunConfig& cfg, const NoiseSchedule& schedule) {
    if (cfg.model.kind == "analytic") {
        return std::make_unique<AnalyticDenoiser>(make_prior(cfg.model), schedule, cfg.model.band_cutoff);
    }
    auto model = std::make_unique<ToyDiT>(cfg.model.toy);
    if (cfg.model.weights) model->load_tensors(read_tensor_bundle(*cfg.model.weights));
    return model;
}

inline CacheTable load_table_file(const std::filesystem::path& path) {
    nlohmann::json j;
    std::ifstream in(path);
    if (!in) throw IoError("cannot open cache table " + path.string());
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidTableError(path.string() + " is not valid JSON: " + e.what(), -1);
    }
    return table_from_json(j);
}

inline CachePolicy make_policy(const PolicySpec& p) {
    if (p.kind == "interval-both") return IntervalBothPolicy{p.n};
    if (p.kind == "interval-separate") return IntervalSeparatePolicy{p.n_attn, p.n_mlp};
    if (p.kind == "table") return TableDrivenPolicy{load_table_file(p.table_path)};
    return NoCachePolicy{};
}

}  // namespace febcache
