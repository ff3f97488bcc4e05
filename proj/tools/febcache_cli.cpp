// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0
//
// febcache command-line front end.
//
//   febcache gen-table  [--config f] [overrides]
//   febcache sample     [--config f] [overrides]
//   febcache analyze    --kind snr|bands|paired-error|speedup --in trace.csv...
//   febcache bias-sweep --rho 0,0.8 --N 1,5
//   febcache bench      [--config f] [overrides]
//
// Exit codes: 0 ok, 1 usage, 2 IO, 3 invalid table, 4 incompatible inputs.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "febcache/analysis.hpp"
#include "febcache/bias.hpp"
#include "febcache/config.hpp"
#include "febcache/tablegen.hpp"
#include "febcache/trace_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace febcache::cli {

enum Exit : int { kOk = 0, kUsage = 1, kIo = 2, kInvalidTable = 3, kIncompatible = 4 };

/// Flags that override config fields. Unset flags leave the config alone.
struct Overrides {
    std::optional<std::string> model;
    std::optional<std::uint64_t> model_seed;
    std::optional<int> T;
    std::optional<double> beta_start;
    std::optional<double> beta_end;
    std::optional<std::string> sampler;
    std::optional<int> steps;
    std::optional<std::string> policy;
    std::optional<int> n;
    std::optional<int> n_attn;
    std::optional<int> n_mlp;
    std::optional<std::string> table;
    std::optional<bool> scaling;
    std::optional<double> b_h;
    std::optional<double> b_l;
    std::optional<double> t_thre;
    std::optional<int> tablegen_n;
    std::optional<std::string> a;
    std::optional<double> b;
    std::optional<double> stage_boundary;
    std::optional<std::uint64_t> seed;
    std::optional<int> count;
    std::optional<int> threads;
    std::optional<int> snapshot_stride;
    std::optional<std::string> out;
};

struct RunArgs {
    std::optional<std::string> config;
    Overrides o;
};

void add_run_options(CLI::App& cmd, RunArgs& args) {
    Overrides& o = args.o;
    cmd.add_option("--config", args.config, "JSON run config");
    cmd.add_option("--model", o.model, "toy-dit | analytic");
    cmd.add_option("--model-seed", o.model_seed, "toy model weight seed");
    cmd.add_option("--T", o.T, "schedule length");
    cmd.add_option("--beta-start", o.beta_start);
    cmd.add_option("--beta-end", o.beta_end);
    cmd.add_option("--sampler", o.sampler, "ddpm | ddim");
    cmd.add_option("--steps", o.steps, "sampler steps (0 = all)");
    cmd.add_option("--policy", o.policy, "no-cache | interval-both | interval-separate | table");
    cmd.add_option("--N", o.n, "interval for interval-both");
    cmd.add_option("--N-attn", o.n_attn);
    cmd.add_option("--N-mlp", o.n_mlp);
    cmd.add_option("--table", o.table, "cache table JSON (implies --policy table)");
    cmd.add_option("--scaling", o.scaling, "enable noise scaling (true/false)");
    cmd.add_option("--b-h", o.b_h);
    cmd.add_option("--b-l", o.b_l);
    cmd.add_option("--t-thre", o.t_thre, "scaling stage boundary");
    cmd.add_option("--n", o.tablegen_n, "table generation sample count");
    cmd.add_option("--a", o.a, "threshold intercept (number or inf)");
    cmd.add_option("--b", o.b, "threshold slope");
    cmd.add_option("--stage-boundary", o.stage_boundary, "table generation stage boundary");
    cmd.add_option("--seed", o.seed, "base seed");
    cmd.add_option("--count", o.count, "number of seeds");
    cmd.add_option("--threads", o.threads);
    cmd.add_option("--snapshot-stride", o.snapshot_stride);
    cmd.add_option("--out", o.out, "output directory");
}

std::string absolute_string(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

RunConfig load_config(const RunArgs& args) {
    json j = json::object();
    fs::path base;
    if (args.config) {
        j = read_json_file(*args.config);
        if (!j.is_object()) throw std::invalid_argument(*args.config + ": config must be a JSON object");
        base = fs::path(*args.config).parent_path();
    }
    const Overrides& o = args.o;
    auto set = [&](const char* section, const char* key, const auto& value) {
        if (!value) return;
        if (section == nullptr) {
            j[key] = *value;
        } else {
            j[section][key] = *value;
        }
    };
    set("model", "kind", o.model);
    set("model", "seed", o.model_seed);
    set("schedule", "T", o.T);
    set("schedule", "beta_start", o.beta_start);
    set("schedule", "beta_end", o.beta_end);
    set("sampler", "kind", o.sampler);
    set("sampler", "steps", o.steps);
    set("policy", "kind", o.policy);
    set("policy", "N", o.n);
    set("policy", "N_attn", o.n_attn);
    set("policy", "N_mlp", o.n_mlp);
    if (o.table) {
        j["policy"]["kind"] = "table";
        j["policy"]["path"] = absolute_string(*o.table);
    }
    set("scaling", "enabled", o.scaling);
    set("scaling", "b_h", o.b_h);
    set("scaling", "b_l", o.b_l);
    set("scaling", "t_thre", o.t_thre);
    set("tablegen", "n", o.tablegen_n);
    if (o.a) {
        if (*o.a == "inf") {
            j["tablegen"]["a"] = "inf";
        } else {
            std::size_t used = 0;
            const double a = std::stod(*o.a, &used);
            if (used != o.a->size()) throw std::invalid_argument("--a must be a number or inf");
            j["tablegen"]["a"] = a;
        }
    }
    set("tablegen", "b", o.b);
    set("tablegen", "t_thre", o.stage_boundary);
    set("seeds", "base", o.seed);
    set("seeds", "count", o.count);
    set(nullptr, "threads", o.threads);
    set(nullptr, "snapshot_stride", o.snapshot_stride);
    set(nullptr, "output_dir", o.out);
    return parse_run_config(j, base);
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw IoError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    out.close();
    if (!out) throw IoError("write failed for " + path.string());
}

std::string histogram_line(const CacheTable& table) {
    const auto h = table.histogram();
    std::string s;
    for (CacheTag tag : {CacheTag::None, CacheTag::Attn, CacheTag::Mlp, CacheTag::Both}) {
        if (!s.empty()) s += ' ';
        s += std::string(to_string(tag)) + '=' + std::to_string(h[static_cast<std::size_t>(tag)]);
    }
    return s;
}

/// Config as recorded in artifacts: no thread count or output location.
json provenance_config(const RunConfig& cfg) {
    json j = to_json(cfg);
    j.erase("threads");
    j.erase("output_dir");
    return j;
}

int cmd_gen_table(const RunArgs& args) {
    const RunConfig cfg = load_config(args);
    const NoiseSchedule sched = cfg.schedule();
    const auto predictor = make_predictor(cfg, sched);
    const std::string hash = config_hash(cfg);
    ensure_dir(cfg.output_dir);

    const GeneratedTable gen = generate_table(*predictor, sched, cfg.tablegen(), cfg.threads);
    const CacheTable& table = gen.aggregate.table;

    json tj = table_to_json(table);
    tj["config_hash"] = hash;
    write_json(cfg.output_dir / "cache_table.json", tj);

    json votes = json::array();
    const int T = table.steps();
    for (int i = 0; i < T; ++i) {
        const auto& v = gen.aggregate.votes[static_cast<std::size_t>(i)];
        votes.push_back({{"step", T - i}, {"none", v[0]}, {"attn", v[1]}, {"mlp", v[2]}, {"both", v[3]}});
    }
    json samples = json::array();
    for (const SingleTable& s : gen.samples) samples.push_back(table_to_json(s.table)["tags"]);
    write_json(cfg.output_dir / "cache_table.provenance.json",
               {{"config_hash", hash}, {"config", provenance_config(cfg)}, {"votes", votes}, {"samples", samples}});

    std::cout << "cache table T=" << T << ": " << histogram_line(table) << '\n';
    return kOk;
}

int cmd_sample(const RunArgs& args) {
    const RunConfig cfg = load_config(args);
    const NoiseSchedule sched = cfg.schedule();
    const CachePolicy policy = make_policy(cfg.policy);
    std::optional<CacheTable> table;
    if (const auto* tp = std::get_if<TableDrivenPolicy>(&policy)) table = tp->table;
    resolve_plan(policy, cfg.sampler.resolved_steps(sched));  // reports a bad table before any work

    const auto predictor = make_predictor(cfg, sched);
    const std::string hash = config_hash(cfg, table);
    ensure_dir(cfg.output_dir);

    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < cfg.seed_count; ++i) seeds.push_back(cfg.seed_base + static_cast<std::uint64_t>(i));
    const TraceOptions opts{cfg.snapshot_stride, hash};
    const std::vector<Trace> traces =
        run_batch(*predictor, policy, cfg.scaling_or_none(), sched, cfg.sampler, seeds, opts, cfg.threads);

    const ScheduleParams params{cfg.T, cfg.beta_start, cfg.beta_end};
    json files = json::array();
    for (const Trace& tr : traces) {
        const std::string stem = "trace_" + std::to_string(tr.seed);
        const TraceFiles tf = trace_files(cfg.output_dir, stem);
        write_trace(tf, tr, params, describe(policy));
        files.push_back({{"seed", tr.seed},
                         {"csv", tf.csv.filename().string()},
                         {"states", tf.states.filename().string()}});
    }
    write_json(cfg.output_dir / "manifest.json", {{"config_hash", hash},
                                                  {"policy", describe(policy)},
                                                  {"config", provenance_config(cfg)},
                                                  {"files", files}});
    std::cout << "wrote " << traces.size() << " traces to " << cfg.output_dir.string() << '\n';
    return kOk;
}

struct AnalyzeArgs {
    std::string kind;
    std::vector<std::string> inputs;
    std::string out = "out";
    std::optional<std::string> output;
    double cutoff = kDefaultBandCutoff;
    double cap = kDefaultSnrCap;
    std::optional<int> step;
};

int cmd_analyze(const AnalyzeArgs& args) {
    std::vector<LoadedTrace> loaded;
    for (const std::string& in : args.inputs) loaded.push_back(read_trace(in));
    auto want_inputs = [&](std::size_t lo, std::size_t hi) {
        if (loaded.size() < lo || loaded.size() > hi) {
            throw std::invalid_argument("analyze " + args.kind + " takes " + std::to_string(lo) +
                                        (hi == lo ? "" : "+") + " input trace(s)");
        }
    };
    const fs::path out_path = args.output ? fs::path(*args.output) : fs::path(args.out) / (args.kind + ".csv");
    if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());

    if (args.kind == "snr") {
        want_inputs(1, 1);
        const LoadedTrace& lt = loaded.front();
        const auto curve = snr_curve(lt.trace, lt.schedule.build(), args.cap);
        CsvWriter csv(out_path, lt.trace.config_hash, "step,snr");
        for (const CurvePoint& p : curve) csv.row(p.step, p.value);
        csv.close();
    } else if (args.kind == "bands") {
        want_inputs(1, 1);
        const LoadedTrace& lt = loaded.front();
        const auto curve = band_curve(lt.trace, args.cutoff);
        CsvWriter csv(out_path, lt.trace.config_hash, "step,low_l2,high_l2");
        for (const BandPoint& p : curve) csv.row(p.step, p.energy.low, p.energy.high);
        csv.close();
    } else if (args.kind == "paired-error") {
        want_inputs(2, 2);
        const Trace& a = loaded[0].trace;
        const Trace& b = loaded[1].trace;
        std::vector<int> steps;
        if (args.step) {
            steps.push_back(*args.step);
        } else {
            for (const TraceStep& st : a.steps) {
                const TraceStep* other = b.find_step(st.step);
                if (st.x_t && other != nullptr && other->x_t) steps.push_back(st.step);
            }
        }
        std::vector<FeatureError> errs;
        for (int s : steps) errs.push_back(paired_feature_error(a, b, s));  // checks pairing first
        CsvWriter csv(out_path, fnv1a_hex(a.config_hash + "|" + b.config_hash), "step,l1,l2");
        for (std::size_t i = 0; i < steps.size(); ++i) csv.row(steps[i], errs[i].l1, errs[i].l2);
        csv.close();
    } else if (args.kind == "speedup") {
        want_inputs(1, args.inputs.size() + 1);
        std::vector<Trace> traces;
        std::string hashes;
        for (const LoadedTrace& lt : loaded) {
            traces.push_back(lt.trace);
            hashes += lt.trace.config_hash + "|";
        }
        const auto rows = speedup_report(traces, traces.front());
        CsvWriter csv(out_path, fnv1a_hex(hashes), "trace,macs,mac_ratio");
        for (std::size_t i = 0; i < rows.size(); ++i) {
            csv.row(args.inputs[i], rows[i].macs, rows[i].mac_ratio);
        }
        csv.close();
    } else {
        throw std::invalid_argument("unknown analysis kind \"" + args.kind + "\"");
    }
    std::cout << "wrote " << out_path.string() << '\n';
    return kOk;
}

struct SweepArgs {
    std::vector<double> rho;
    std::vector<int> n;
    std::string out = "out";
    std::optional<std::string> output;
    bool json = false;
};

int cmd_bias_sweep(const SweepArgs& args) {
    std::vector<BiasReport> reports;
    for (double rho : args.rho) {
        for (int n : args.n) reports.push_back(make_bias_report(rho, n));
    }
    const std::string hash = fnv1a_hex(json{{"rho", args.rho}, {"N", args.n}}.dump());
    const fs::path out_path = args.output ? fs::path(*args.output) : fs::path(args.out) / "bias_sweep.csv";
    if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());

    CsvWriter csv(out_path, hash, "rho,N,covariance_sum,total_var,std,amplification");
    for (const BiasReport& r : reports) csv.row(r.rho, r.n, r.covariance_sum, r.total_var, r.std_dev, r.amplification);
    csv.close();
    if (args.json) {
        json rows = json::array();
        for (const BiasReport& r : reports) rows.push_back(to_json(r));
        fs::path jp = out_path;
        jp.replace_extension(".json");
        write_json(jp, {{"config_hash", hash}, {"rows", rows}});
    }
    std::cout << "wrote " << out_path.string() << '\n';
    return kOk;
}

/// Times the configured policy against an uncached run of the same seeds.
int cmd_bench(const RunArgs& args) {
    RunConfig cfg = load_config(args);
    const NoiseSchedule sched = cfg.schedule();
    const CachePolicy policy = make_policy(cfg.policy);
    std::optional<CacheTable> table;
    if (const auto* tp = std::get_if<TableDrivenPolicy>(&policy)) table = tp->table;
    resolve_plan(policy, cfg.sampler.resolved_steps(sched));
    const auto predictor = make_predictor(cfg, sched);
    const std::string hash = config_hash(cfg, table);
    ensure_dir(cfg.output_dir);

    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < cfg.seed_count; ++i) seeds.push_back(cfg.seed_base + static_cast<std::uint64_t>(i));
    const TraceOptions opts{0, hash};

    struct Totals {
        std::uint64_t macs = 0;
        double seconds = 0.0;
    };
    auto run = [&](const CachePolicy& p) {
        Totals t;
        for (const Trace& tr : run_batch(*predictor, p, cfg.scaling_or_none(), sched, cfg.sampler, seeds, opts, 1)) {
            t.macs += tr.total_cost().total();
            t.seconds += tr.wall_seconds;
        }
        return t;
    };
    const Totals base = run(NoCachePolicy{});
    const Totals mine = run(policy);

    const fs::path out_path = cfg.output_dir / "bench.csv";
    CsvWriter csv(out_path, hash, "policy,macs,seconds,speedup,mac_ratio");
    auto emit = [&](const std::string& name, const Totals& t) {
        const double speedup = t.seconds > 0.0 ? base.seconds / t.seconds : 1.0;
        const double ratio = base.macs > 0 ? static_cast<double>(t.macs) / static_cast<double>(base.macs) : 1.0;
        csv.row(name, t.macs, t.seconds, speedup, ratio);
        std::cout << name << ": macs=" << t.macs << " seconds=" << t.seconds << " speedup=" << speedup
                  << " mac_ratio=" << ratio << '\n';
    };
    emit("no-cache", base);
    emit(describe(policy), mine);
    csv.close();
    return kOk;
}

int run(int argc, char** argv) {
    CLI::App app{"febcache: cached diffusion sampling experiments"};
    app.require_subcommand(1);

    RunArgs gen_args;
    RunArgs sample_args;
    RunArgs bench_args;
    AnalyzeArgs analyze_args;
    SweepArgs sweep_args;

    CLI::App* gen = app.add_subcommand("gen-table", "generate a cache table");
    add_run_options(*gen, gen_args);
    CLI::App* sample = app.add_subcommand("sample", "run trajectories and write traces");
    add_run_options(*sample, sample_args);
    CLI::App* bench = app.add_subcommand("bench", "time a policy against no caching");
    add_run_options(*bench, bench_args);

    CLI::App* analyze = app.add_subcommand("analyze", "analyze written traces");
    analyze->add_option("--kind", analyze_args.kind, "snr | bands | paired-error | speedup")->required();
    analyze->add_option("--in", analyze_args.inputs, "trace CSV files")->required();
    analyze->add_option("--out", analyze_args.out, "output directory");
    analyze->add_option("--output", analyze_args.output, "output file (overrides --out)");
    analyze->add_option("--cutoff", analyze_args.cutoff, "low band radius as a fraction of Nyquist");
    analyze->add_option("--cap", analyze_args.cap, "SNR cap");
    analyze->add_option("--step", analyze_args.step, "sampler position for paired-error");

    CLI::App* sweep = app.add_subcommand("bias-sweep", "closed-form correlated error variance");
    sweep->add_option("--rho", sweep_args.rho)->required()->delimiter(',');
    sweep->add_option("--N", sweep_args.n)->required()->delimiter(',');
    sweep->add_option("--out", sweep_args.out, "output directory");
    sweep->add_option("--output", sweep_args.output, "output file (overrides --out)");
    sweep->add_flag("--json", sweep_args.json, "also write a JSON report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    if (*gen) return cmd_gen_table(gen_args);
    if (*sample) return cmd_sample(sample_args);
    if (*bench) return cmd_bench(bench_args);
    if (*analyze) return cmd_analyze(analyze_args);
    return cmd_bias_sweep(sweep_args);
}

}  // namespace febcache::cli

int main(int argc, char** argv) {
    using namespace febcache;
    try {
        return cli::run(argc, argv);
    } catch (const InvalidTableError& e) {
        std::cerr << "error: invalid cache table: " << e.what() << '\n';
        if (e.step() >= 0) std::cerr << "offending step: " << e.step() << '\n';
        return cli::kInvalidTable;
    } catch (const IncompatibleInputError& e) {
        std::cerr << "error: incompatible inputs: " << e.what() << '\n';
        return cli::kIncompatible;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kUsage;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::kUsage;
    }
}
