// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "febcache/cache.hpp"
#include "febcache/model.hpp"
#include "febcache/numerics.hpp"
#include "febcache/schedule.hpp"

namespace febcache {

/// x0_hat = (x_t - sqrt(1 - abar_t) * b * eps_hat) / sqrt(abar_t)
inline Grid predict_x0(const Grid& x_t, int t, const Grid& eps_hat, double b, const NoiseSchedule& s) {
    require_same_shape(x_t.shape(), eps_hat.shape(), "predict_x0");
    const double ab = s.alpha_bar(t);
    const double inv = 1.0 / std::sqrt(ab);
    return lincomb(inv, x_t, -std::sqrt(1.0 - ab) * b * inv, eps_hat);
}

/// One ancestral DDPM step with the noise prediction scaled by b. Step 1
/// returns x0_hat without injecting noise.
inline Grid ddpm_step(const Grid& x_t, int t, const Grid& eps_hat, double b, const NoiseSchedule& s,
                      SeededRng& rng) {
    Grid x0_hat = predict_x0(x_t, t, eps_hat, b, s);
    if (t == 1) return x0_hat;
    PosteriorMoments post = posterior_moments(x_t, x0_hat, t, s);
    const double sigma = std::sqrt(post.variance);
    for (double& v : post.mean.values()) v += sigma * rng.normal();
    return std::move(post.mean);
}

/// Deterministic DDIM (eta = 0) jump from t to t_prev. t_prev may be 0,
/// which lands on x0_hat.
inline Grid ddim_step(const Grid& x_t, int t, int t_prev, const Grid& eps_hat, double b, const NoiseSchedule& s) {
    if (t_prev >= t || t_prev < 0) throw std::invalid_argument("ddim_step: need 0 <= t_prev < t");
    const Grid x0_hat = predict_x0(x_t, t, eps_hat, b, s);
    const double ab_prev = s.alpha_bar(t_prev);
    return lincomb(std::sqrt(ab_prev), x0_hat, std::sqrt(1.0 - ab_prev) * b, eps_hat);
}

enum class SamplerKind { Ddpm, Ddim };

inline std::string to_string(SamplerKind k) { return k == SamplerKind::Ddpm ? "ddpm" : "ddim"; }

/// Sampler choice and its number of denoising steps (NFE). DDPM always runs
/// every schedule step; DDIM visits an evenly spaced subsequence ending at 1.
struct SamplerSpec {
    SamplerKind kind = SamplerKind::Ddpm;
    int steps = 0;  // 0 means "all schedule steps"

    int resolved_steps(const NoiseSchedule& s) const {
        const int n = steps == 0 ? s.steps() : steps;
        if (n < 2) throw std::invalid_argument("sampler needs at least 2 steps");
        if (kind == SamplerKind::Ddpm && n != s.steps()) {
            throw std::invalid_argument("DDPM must run all " + std::to_string(s.steps()) + " schedule steps");
        }
        if (n > s.steps()) throw std::invalid_argument("sampler steps exceed schedule length");
        return n;
    }
};

/// Schedule timestep visited at sampler position k (k = n..1). Position n is
/// always timestep T and position 1 is timestep 1.
inline int timestep_at(int position, int n_steps, int schedule_steps) {
    if (n_steps == schedule_steps) return position;
    const double frac = static_cast<double>(position - 1) / static_cast<double>(n_steps - 1);
    return 1 + static_cast<int>(std::lround(frac * static_cast<double>(schedule_steps - 1)));
}

struct TraceStep {
    int step = 0;      // sampler position, n..1
    int timestep = 0;  // schedule index the predictor saw
    CacheTag tag = CacheTag::None;
    double b = 1.0;
    double eps_norm = 0.0;  // ||eps_hat||_2, unscaled
    ComputeCost cost;
    std::optional<Grid> x_t;
    std::optional<Grid> eps_hat;  // unscaled prediction

    bool operator==(const TraceStep&) const = default;
};

/// Full record of one reverse-process run.
struct Trace {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string pairing_key;  // predictor + schedule + sampler; policy excluded
    std::string model;
    SamplerKind sampler = SamplerKind::Ddpm;
    int schedule_steps = 0;
    Shape shape{};
    std::vector<TraceStep> steps;
    Grid x0;
    double wall_seconds = 0.0;  // not part of trajectory identity

    ComputeCost total_cost() const {
        ComputeCost c;
        for (const TraceStep& s : steps) c += s.cost;
        return c;
    }

    const TraceStep* find_step(int step) const {
        for (const TraceStep& s : steps) {
            if (s.step == step) return &s;
        }
        return nullptr;
    }
};

/// Equality of everything a trajectory determines (wall time excluded).
inline bool same_trajectory(const Trace& a, const Trace& b) {
    return a.seed == b.seed && a.config_hash == b.config_hash && a.pairing_key == b.pairing_key &&
           a.sampler == b.sampler && a.schedule_steps == b.schedule_steps && a.shape == b.shape &&
           a.steps == b.steps && a.x0 == b.x0;
}

struct TraceOptions {
    int snapshot_stride = 1;  // 0 disables snapshots
    std::string config_hash;
};

inline std::string pairing_key(const NoisePredictor& predictor, const NoiseSchedule& s, SamplerKind kind, int n) {
    std::string betas;
    for (double b : s.betas()) betas += std::to_string(std::bit_cast<std::uint64_t>(b)) + ",";
    return fnv1a_hex(predictor.identity() + "|" + to_string(kind) + "|" + std::to_string(n) + "|" + betas);
}

/// Runs the reverse process from x_T ~ N(0, I). The run's random stream is
/// (seed, 0): x_T first, then the per-step DDPM noise.
inline Trace run_trajectory(const NoisePredictor& predictor, const CachePolicy& policy,
                            const std::optional<ScalingSchedule>& scaling, const NoiseSchedule& schedule,
                            SamplerSpec spec, std::uint64_t seed, const TraceOptions& options = {}) {
    const auto start = std::chrono::steady_clock::now();
    if (scaling) scaling->validate();
    const int n = spec.resolved_steps(schedule);
    const CacheTable plan = resolve_plan(policy, n);

    Trace trace;
    trace.seed = seed;
    trace.config_hash = options.config_hash;
    trace.model = predictor.identity();
    trace.sampler = spec.kind;
    trace.schedule_steps = schedule.steps();
    trace.shape = predictor.shape();
    trace.pairing_key = pairing_key(predictor, schedule, spec.kind, n);
    trace.steps.reserve(static_cast<std::size_t>(n));

    SeededRng rng(seed, 0);
    CacheState cache = predictor.make_cache();
    Grid x = gaussian_sample(rng, predictor.shape());

    for (int k = n; k >= 1; --k) {
        const int t = timestep_at(k, n, schedule.steps());
        const CacheTag tag = plan.at(k);
        const double b = scaling ? scaling_factor(static_cast<double>(k) / n, *scaling) : 1.0;
        Grid eps = predictor.predict(x, t, tag, cache);

        TraceStep rec;
        rec.step = k;
        rec.timestep = t;
        rec.tag = tag;
        rec.b = b;
        rec.eps_norm = l2_norm(eps);
        rec.cost = predictor.cost(tag);
        if (options.snapshot_stride > 0 && (n - k) % options.snapshot_stride == 0) {
            rec.x_t = x;
            rec.eps_hat = eps;
        }

        if (spec.kind == SamplerKind::Ddpm) {
            x = ddpm_step(x, t, eps, b, schedule, rng);
        } else {
            const int t_prev = k == 1 ? 0 : timestep_at(k - 1, n, schedule.steps());
            x = ddim_step(x, t, t_prev, eps, b, schedule);
        }
        trace.steps.push_back(std::move(rec));
    }
    trace.x0 = std::move(x);
    trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return trace;
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers. The first
/// exception thrown by any task is rethrown after all workers stop.
inline void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, count));
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = count;
                }
            }
        });
    }
    for (std::thread& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

/// One trajectory per seed; results follow the order of `seeds` whatever the
/// thread count.
inline std::vector<Trace> run_batch(const NoisePredictor& predictor, const CachePolicy& policy,
                                    const std::optional<ScalingSchedule>& scaling, const NoiseSchedule& schedule,
                                    SamplerSpec spec, const std::vector<std::uint64_t>& seeds,
                                    const TraceOptions& options = {}, unsigned threads = 1) {
    std::vector<Trace> out(seeds.size());
    parallel_for(seeds.size(), threads, [&](std::size_t i) {
        out[i] = run_trajectory(predictor, policy, scaling, schedule, spec, seeds[i], options);
    });
    return out;
}

}  // namespace febcache
