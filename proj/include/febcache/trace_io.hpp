// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "febcache/errors.hpp"
#include "febcache/sampler.hpp"
#include "febcache/schedule.hpp"
#include "febcache/tensor_io.hpp"

namespace febcache {

/// Shortest decimal form that reads back to the same double.
inline std::string format_real(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// Parameters of the linear schedule a trace was produced with.
struct ScheduleParams {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;

    NoiseSchedule build() const { return build_linear_schedule(T, beta_start, beta_end); }
};

struct TraceFiles {
    std::filesystem::path csv;
    std::filesystem::path states;  // tensor bundle; sidecar at states + ".json"
};

inline TraceFiles trace_files(const std::filesystem::path& dir, const std::string& stem) {
    return {dir / (stem + ".csv"), dir / (stem + ".states.bin")};
}

/// The state bundle path that belongs to a trace CSV.
inline std::filesystem::path states_for_csv(const std::filesystem::path& csv) {
    std::filesystem::path p = csv;
    p.replace_extension(".states.bin");
    return p;
}

/// Writes the per-step CSV
///   # config_hash=<hash>
///   t,tag,b,eps_norm,cost
/// and the state bundle holding x_t/eps_hat snapshots, the final sample and
/// the full step records in its sidecar meta.
inline void write_trace(const TraceFiles& files, const Trace& trace, const ScheduleParams& params,
                        const std::string& policy) {
    {
        std::ofstream csv(files.csv, std::ios::trunc);
        if (!csv) throw IoError("cannot open " + files.csv.string() + " for writing");
        csv << "# config_hash=" << trace.config_hash << '\n' << "t,tag,b,eps_norm,cost\n";
        for (const TraceStep& st : trace.steps) {
            csv << st.step << ',' << to_string(st.tag) << ',' << format_real(st.b) << ',' << format_real(st.eps_norm)
                << ',' << st.cost.total() << '\n';
        }
        if (!csv) throw IoError("write failed for " + files.csv.string());
    }

    TensorBundle bundle;
    const std::vector<std::size_t> shape{trace.shape.height, trace.shape.width, trace.shape.channels};
    nlohmann::json steps = nlohmann::json::array();
    for (const TraceStep& st : trace.steps) {
        steps.push_back({{"step", st.step},
                         {"timestep", st.timestep},
                         {"tag", to_string(st.tag)},
                         {"b", st.b},
                         {"eps_norm", st.eps_norm},
                         {"cost", {st.cost.attn, st.cost.mlp, st.cost.overhead}},
                         {"snapshot", st.x_t.has_value()}});
        if (st.x_t) {
            bundle.tensors.push_back({"x_t." + std::to_string(st.step), shape, st.x_t->storage()});
            bundle.tensors.push_back({"eps_hat." + std::to_string(st.step), shape, st.eps_hat->storage()});
        }
    }
    bundle.tensors.push_back({"x0", shape, trace.x0.storage()});
    bundle.meta = {{"config_hash", trace.config_hash},
                   {"seed", trace.seed},
                   {"pairing_key", trace.pairing_key},
                   {"model", trace.model},
                   {"policy", policy},
                   {"sampler", to_string(trace.sampler)},
                   {"schedule", {{"T", params.T}, {"beta_start", params.beta_start}, {"beta_end", params.beta_end}}},
                   {"shape", shape},
                   {"steps", steps}};
    write_tensor_bundle(files.states, bundle);
}

struct LoadedTrace {
    Trace trace;
    ScheduleParams schedule;
    std::string policy;
};

/// Reads a trace back from its CSV path (or its state bundle path).
inline LoadedTrace read_trace(const std::filesystem::path& path) {
    const std::filesystem::path states = path.extension() == ".csv" ? states_for_csv(path) : path;
    if (!std::filesystem::exists(states)) throw IoError("trace state bundle " + states.string() + " not found");
    const TensorBundle bundle = read_tensor_bundle(states);
    const nlohmann::json& m = bundle.meta;
    LoadedTrace out;
    try {
        Trace& tr = out.trace;
        tr.config_hash = m.at("config_hash").get<std::string>();
        tr.seed = m.at("seed").get<std::uint64_t>();
        tr.pairing_key = m.at("pairing_key").get<std::string>();
        tr.model = m.at("model").get<std::string>();
        tr.sampler = m.at("sampler").get<std::string>() == "ddim" ? SamplerKind::Ddim : SamplerKind::Ddpm;
        const auto shape = m.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 3) throw IoError(states.string() + ": shape must have three entries");
        tr.shape = Shape{shape[0], shape[1], shape[2]};
        out.schedule.T = m.at("schedule").at("T").get<int>();
        out.schedule.beta_start = m.at("schedule").at("beta_start").get<double>();
        out.schedule.beta_end = m.at("schedule").at("beta_end").get<double>();
        tr.schedule_steps = out.schedule.T;
        out.policy = m.value("policy", std::string{});

        auto tensor = [&](const std::string& name) {
            const NamedTensor* t = bundle.find(name);
            if (t == nullptr) throw IoError(states.string() + " lacks tensor " + name);
            return Grid(tr.shape, t->data);
        };
        for (const auto& s : m.at("steps")) {
            TraceStep st;
            st.step = s.at("step").get<int>();
            st.timestep = s.at("timestep").get<int>();
            const auto tag = parse_tag(s.at("tag").get<std::string>());
            if (!tag) throw IoError(states.string() + ": unknown tag at step " + std::to_string(st.step));
            st.tag = *tag;
            st.b = s.at("b").get<double>();
            st.eps_norm = s.at("eps_norm").get<double>();
            const auto cost = s.at("cost").get<std::vector<std::uint64_t>>();
            if (cost.size() != 3) throw IoError(states.string() + ": cost must have three entries");
            st.cost = {cost[0], cost[1], cost[2]};
            if (s.at("snapshot").get<bool>()) {
                st.x_t = tensor("x_t." + std::to_string(st.step));
                st.eps_hat = tensor("eps_hat." + std::to_string(st.step));
            }
            tr.steps.push_back(std::move(st));
        }
        tr.x0 = tensor("x0");
    } catch (const nlohmann::json::exception& e) {
        throw IoError(states.string() + ": malformed trace metadata: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw IoError(states.string() + ": " + e.what());
    }
    return out;
}

/// Writes a CSV with a config-hash comment line followed by `header`.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::string& config_hash, const std::string& header)
        : path_(path), out_(path, std::ios::trunc) {
        if (!out_) throw IoError("cannot open " + path.string() + " for writing");
        out_ << "# config_hash=" << config_hash << '\n' << header << '\n';
    }

    template <class... Cells>
    void row(const Cells&... cells) {
        std::size_t i = 0;
        ((out_ << (i++ == 0 ? "" : ",") << cell(cells)), ...);
        out_ << '\n';
    }

    void close() {
        out_.close();
        if (!out_) throw IoError("write failed for " + path_.string());
    }

private:
    static std::string cell(double v) { return format_real(v); }
    static std::string cell(const std::string& v) { return v; }
    static std::string cell(const char* v) { return v; }
    template <class T>
    static std::string cell(const T& v) {
        return std::to_string(v);
    }

    std::filesystem::path path_;
    std::ofstream out_;
};

}  // namespace febcache
