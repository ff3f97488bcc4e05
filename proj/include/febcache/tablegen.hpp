// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "febcache/cache.hpp"
#include "febcache/model.hpp"
#include "febcache/numerics.hpp"
#include "febcache/sampler.hpp"
#include "febcache/schedule.hpp"

namespace febcache {

struct TableGenConfig {
    int samples = 8;
    ScalingSchedule scaling{};
    ThresholdSchedule threshold{};
    double stage_boundary = 0.4;  // normalized t separating early and late stages
    SamplerSpec sampler{};
    std::uint64_t seed = 0;

    void validate() const {
        if (samples < 1) throw std::invalid_argument("table generation needs n >= 1 samples");
        scaling.validate();
        if (!(stage_boundary > 0.0 && stage_boundary < 1.0)) {
            throw std::invalid_argument("stage boundary must lie in (0, 1)");
        }
    }
};

/// Single-component candidate for step t of T: MLP while t/T >= boundary
/// (high noise), attention afterwards.
inline CacheTag stage_candidate(int t, int total_steps, double boundary) {
    return static_cast<double>(t) / static_cast<double>(total_steps) >= boundary ? CacheTag::Mlp : CacheTag::Attn;
}

/// Error norms observed at one step of a greedy generation pass.
struct StepErrors {
    int step = 0;
    double fresh = 0.0;      // ||eps(x_t, t)||, unscaled
    double both = 0.0;       // ||b(t) * eps with both components reused||
    double candidate = 0.0;  // ||b(t) * eps with the stage candidate reused||
    double threshold = 0.0;
    CacheTag chosen = CacheTag::None;
};

struct SingleTable {
    CacheTable table;
    std::vector<StepErrors> errors;  // steps n-2..1 in execution order
};

/// One greedy pass over a fresh trajectory.
///
/// Steps n and n-1 are computed fresh. For every later step the fresh, the
/// both-reused and the candidate-reused predictions are all evaluated from
/// the cache as it stood before the step, so cached candidates see deltas
/// from an earlier step. The step is tagged Both if the scaled both-reused
/// norm is within delta(t) of the fresh norm, else Candidate under the same
/// test, else None. The trajectory then advances with the chosen prediction
/// scaled by b(t), and the cache carries forward exactly what executing that
/// tag would leave behind.
inline SingleTable generate_table_single(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                                         const TableGenConfig& cfg, SeededRng& rng) {
    cfg.validate();
    const int n = cfg.sampler.resolved_steps(schedule);
    SingleTable out{CacheTable(n, CacheTag::None), {}};
    out.errors.reserve(static_cast<std::size_t>(std::max(n - 2, 0)));

    CacheState cache = predictor.make_cache();
    Grid x = gaussian_sample(rng, predictor.shape());

    auto advance = [&](const Grid& eps, int k, double b) {
        const int t = timestep_at(k, n, schedule.steps());
        if (cfg.sampler.kind == SamplerKind::Ddpm) {
            x = ddpm_step(x, t, eps, b, schedule, rng);
        } else {
            const int t_prev = k == 1 ? 0 : timestep_at(k - 1, n, schedule.steps());
            x = ddim_step(x, t, t_prev, eps, b, schedule);
        }
    };

    for (int k = n; k >= 1; --k) {
        const int t = timestep_at(k, n, schedule.steps());
        const double b = scaling_factor(static_cast<double>(k) / n, cfg.scaling);
        if (k >= n - 1) {
            const Grid eps = predictor.predict(x, t, CacheTag::None, cache);
            advance(eps, k, b);
            continue;
        }

        const CacheTag candidate = stage_candidate(k, n, cfg.stage_boundary);
        CacheState fresh_cache = cache;
        CacheState both_cache = cache;
        CacheState cand_cache = cache;
        const Grid eps_fresh = predictor.predict(x, t, CacheTag::None, fresh_cache);
        const Grid eps_both = predictor.predict(x, t, CacheTag::Both, both_cache);
        const Grid eps_cand = predictor.predict(x, t, candidate, cand_cache);

        StepErrors e;
        e.step = k;
        e.fresh = l2_norm(eps_fresh);
        e.both = b * l2_norm(eps_both);
        e.candidate = b * l2_norm(eps_cand);
        e.threshold = threshold(k, n, cfg.threshold);
        if (std::abs(e.fresh - e.both) < e.threshold) {
            e.chosen = CacheTag::Both;
            cache = std::move(both_cache);
            advance(eps_both, k, b);
        } else if (std::abs(e.fresh - e.candidate) < e.threshold) {
            e.chosen = candidate;
            cache = std::move(cand_cache);
            advance(eps_cand, k, b);
        } else {
            e.chosen = CacheTag::None;
            cache = std::move(fresh_cache);
            advance(eps_fresh, k, b);
        }
        out.table.set(k, e.chosen);
        out.errors.push_back(e);
    }
    return out;
}

/// Per-step vote counts indexed by tag value.
using VoteCounts = std::vector<std::array<int, 4>>;

struct AggregatedTable {
    CacheTable table;
    VoteCounts votes;  // execution order, step T first
};

/// Per-step plurality vote. Ties go to the least aggressive tag: None, then
/// the single-component tags (the stage candidate first), then Both.
inline AggregatedTable aggregate_tables(const std::vector<CacheTable>& tables, double stage_boundary = 0.4) {
    if (tables.empty()) throw std::invalid_argument("aggregate_tables: no tables");
    const int T = tables.front().steps();
    for (const CacheTable& tb : tables) {
        if (tb.steps() != T) throw std::invalid_argument("aggregate_tables: tables disagree on T");
    }
    AggregatedTable out{CacheTable(T, CacheTag::None), VoteCounts(static_cast<std::size_t>(T))};
    for (int t = T; t >= 1; --t) {
        std::array<int, 4>& votes = out.votes[static_cast<std::size_t>(T - t)];
        for (const CacheTable& tb : tables) ++votes[static_cast<std::size_t>(tb.at(t))];

        const CacheTag cand = stage_candidate(t, T, stage_boundary);
        const CacheTag other = cand == CacheTag::Mlp ? CacheTag::Attn : CacheTag::Mlp;
        CacheTag best = CacheTag::None;
        for (CacheTag tag : {CacheTag::None, cand, other, CacheTag::Both}) {
            if (votes[static_cast<std::size_t>(tag)] > votes[static_cast<std::size_t>(best)]) best = tag;
        }
        out.table.set(t, best);
    }
    require_valid(out.table);
    return out;
}

struct GeneratedTable {
    AggregatedTable aggregate;
    std::vector<SingleTable> samples;
};

/// Runs `cfg.samples` independent greedy passes (sample i draws from stream
/// (seed, i + 1)) and aggregates them. Deterministic for any thread count.
inline GeneratedTable generate_table(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                                     const TableGenConfig& cfg, unsigned threads = 1) {
    cfg.validate();
    std::vector<SingleTable> samples(static_cast<std::size_t>(cfg.samples));
    parallel_for(samples.size(), threads, [&](std::size_t i) {
        SeededRng rng(cfg.seed, i + 1);
        samples[i] = generate_table_single(predictor, schedule, cfg, rng);
    });
    std::vector<CacheTable> tables;
    tables.reserve(samples.size());
    for (const SingleTable& s : samples) tables.push_back(s.table);
    return {aggregate_tables(tables, cfg.stage_boundary), std::move(samples)};
}

}  // namespace febcache
