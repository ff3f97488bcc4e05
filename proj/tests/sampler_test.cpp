// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <vector>

#include "febcache/analytic.hpp"
#include "febcache/errors.hpp"
#include "febcache/sampler.hpp"
#include "febcache/toy_dit.hpp"
#include "test_support.hpp"

namespace febcache {
namespace {

using enum CacheTag;

NoiseSchedule sched50() { return build_linear_schedule(50, 1e-4, 0.02); }

ToyDiTConfig toy_config() {
    ToyDiTConfig cfg;
    cfg.grid = Shape{8, 8, 2};
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_blocks = 2;
    cfg.seed = 1;
    return cfg;
}

TEST(DdpmStep, FinalStepIsX0HatWithoutNoise) {
    const NoiseSchedule s = sched50();
    const Grid x = testing::random_grid(Shape{4, 4, 1}, 1);
    const Grid eps = testing::random_grid(Shape{4, 4, 1}, 2);
    SeededRng rng(1);
    const std::uint64_t before = rng.position();
    EXPECT_EQ(ddpm_step(x, 1, eps, 1.0, s, rng), predict_x0(x, 1, eps, 1.0, s));
    EXPECT_EQ(rng.position(), before);
}

TEST(DdpmStep, LinearInScale) {
    const NoiseSchedule s = sched50();
    const int t = 30;
    const Grid x = testing::random_grid(Shape{4, 4, 1}, 3);
    const Grid eps = testing::random_grid(Shape{4, 4, 1}, 4);
    const double b = 0.93;
    SeededRng r1(5), r2(5);
    const Grid xb = ddpm_step(x, t, eps, b, s, r1);
    const Grid x1 = ddpm_step(x, t, eps, 1.0, s, r2);
    const double ab = s.alpha_bar(t);
    const double coeff = std::sqrt(s.alpha_bar(t - 1)) * s.beta(t) / (1.0 - ab) * std::sqrt(1.0 - ab) / std::sqrt(ab);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(xb[i] - x1[i], (1.0 - b) * coeff * eps[i], 1e-12);
}

TEST(DdimStep, EqualAlphaBarIsNoOp) {
    const NoiseSchedule s = NoiseSchedule::from_betas({0.3, 1e-300});
    ASSERT_EQ(s.alpha_bar(1), s.alpha_bar(2));
    const Grid x = testing::random_grid(Shape{4, 4, 1}, 6);
    const Grid eps = testing::random_grid(Shape{4, 4, 1}, 7);
    EXPECT_LT(l2_norm(sub(ddim_step(x, 2, 1, eps, 1.0, s), x)), 1e-12);
}

TEST(DdimStep, TrueNoiseInvertsQSample) {
    const NoiseSchedule s = sched50();
    const Grid x0 = testing::random_grid(Shape{4, 4, 1}, 8);
    const Grid eps = testing::random_grid(Shape{4, 4, 1}, 9);
    const Grid x_t = q_sample(x0, 40, eps, s);
    EXPECT_LT(l2_norm(sub(predict_x0(x_t, 40, eps, 1.0, s), x0)), 1e-12);
    EXPECT_LT(l2_norm(sub(ddim_step(x_t, 40, 0, eps, 1.0, s), x0)), 1e-12);
}

TEST(DdimStep, RejectsNonDecreasingStep) {
    const NoiseSchedule s = sched50();
    const Grid x(Shape{1, 1, 1});
    EXPECT_THROW(ddim_step(x, 10, 10, x, 1.0, s), std::invalid_argument);
    EXPECT_THROW(ddim_step(x, 10, 12, x, 1.0, s), std::invalid_argument);
}

TEST(SamplerSpec, Resolution) {
    const NoiseSchedule s = sched50();
    EXPECT_EQ((SamplerSpec{SamplerKind::Ddpm, 0}).resolved_steps(s), 50);
    EXPECT_EQ((SamplerSpec{SamplerKind::Ddim, 20}).resolved_steps(s), 20);
    EXPECT_THROW((SamplerSpec{SamplerKind::Ddpm, 20}).resolved_steps(s), std::invalid_argument);
    EXPECT_THROW((SamplerSpec{SamplerKind::Ddim, 51}).resolved_steps(s), std::invalid_argument);
    EXPECT_THROW((SamplerSpec{SamplerKind::Ddim, 1}).resolved_steps(s), std::invalid_argument);
}

TEST(SamplerSpec, TimestepSpacing) {
    EXPECT_EQ(timestep_at(20, 20, 1000), 1000);
    EXPECT_EQ(timestep_at(1, 20, 1000), 1);
    int prev = 0;
    for (int k = 1; k <= 20; ++k) {
        const int t = timestep_at(k, 20, 1000);
        EXPECT_GT(t, prev);
        prev = t;
    }
    EXPECT_EQ(timestep_at(17, 50, 50), 17);
}

TEST(Trajectory, PointMassDdpmConverges) {
    const NoiseSchedule s = sched50();
    const Grid mu = testing::random_grid(Shape{4, 4, 1}, 10);
    const AnalyticDenoiser d(GaussianMixturePrior::point_mass(mu), s);
    std::vector<std::uint64_t> seeds(1000);
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
    TraceOptions opts;
    opts.snapshot_stride = 0;
    const std::vector<Trace> traces = run_batch(d, NoCachePolicy{}, std::nullopt, s, {}, seeds, opts);
    Grid mean(mu.shape(), 0.0);
    for (const Trace& tr : traces) mean = add(mean, tr.x0);
    mean = scaled(mean, 1.0 / static_cast<double>(traces.size()));
    for (std::size_t i = 0; i < mu.size(); ++i) EXPECT_NEAR(mean[i], mu[i], 1e-6);
}

TEST(Trajectory, PointMassDdimConverges) {
    const NoiseSchedule s = build_linear_schedule(1000, 1e-4, 0.02);
    const Grid mu = testing::random_grid(Shape{4, 4, 1}, 11);
    const AnalyticDenoiser d(GaussianMixturePrior::point_mass(mu), s);
    const Trace tr = run_trajectory(d, NoCachePolicy{}, std::nullopt, s, {SamplerKind::Ddim, 20}, 3);
    ASSERT_EQ(tr.steps.size(), 20u);
    EXPECT_EQ(tr.steps.front().timestep, 1000);
    EXPECT_EQ(tr.steps.back().timestep, 1);
    EXPECT_LT(l2_norm(sub(tr.x0, mu)) / std::sqrt(16.0), 1e-6);
}

TEST(Trajectory, AllNoneTableMatchesNoCache) {
    const NoiseSchedule s = sched50();
    const ToyDiT model(toy_config());
    const Trace a = run_trajectory(model, NoCachePolicy{}, ScalingSchedule{}, s, {}, 7);
    const Trace b = run_trajectory(model, TableDrivenPolicy{CacheTable(50, None)}, ScalingSchedule{}, s, {}, 7);
    const Trace c = run_trajectory(model, IntervalBothPolicy{1}, ScalingSchedule{}, s, {}, 7);
    EXPECT_TRUE(same_trajectory(a, b));
    EXPECT_TRUE(same_trajectory(a, c));
}

TEST(Trajectory, PairedDivergenceStartsAtFirstReuse) {
    const NoiseSchedule s = sched50();
    const ToyDiT model(toy_config());
    const Trace base = run_trajectory(model, NoCachePolicy{}, std::nullopt, s, {}, 8);
    const Trace cached = run_trajectory(model, IntervalBothPolicy{2}, std::nullopt, s, {}, 8);
    int first_reuse = 0;
    for (const TraceStep& st : cached.steps) {
        if (st.tag != None) {
            first_reuse = st.step;
            break;
        }
    }
    ASSERT_EQ(first_reuse, 47);
    for (std::size_t i = 0; i < base.steps.size(); ++i) {
        const int k = base.steps[i].step;
        if (k >= first_reuse) {
            EXPECT_EQ(*base.steps[i].x_t, *cached.steps[i].x_t) << k;
        } else {
            EXPECT_NE(*base.steps[i].x_t, *cached.steps[i].x_t) << k;
        }
    }
}

TEST(Trajectory, CostLedgerIntervalTwo) {
    const NoiseSchedule s = sched50();
    const ToyDiT model(toy_config());
    const Trace tr = run_trajectory(model, IntervalBothPolicy{2}, std::nullopt, s, {}, 9);
    const ComputeCost fresh = compute_cost(model.config(), None);
    const ComputeCost both = compute_cost(model.config(), Both);
    EXPECT_EQ(tr.total_cost().total(), 26 * fresh.total() + 24 * both.total());
    ComputeCost sum;
    for (const TraceStep& st : tr.steps) {
        EXPECT_EQ(st.cost, compute_cost(model.config(), st.tag));
        sum += st.cost;
    }
    EXPECT_EQ(sum, tr.total_cost());
}

TEST(Trajectory, RecordsScaleAndUnscaledNorm) {
    const NoiseSchedule s = sched50();
    const ToyDiT model(toy_config());
    const Trace tr = run_trajectory(model, NoCachePolicy{}, ScalingSchedule{}, s, {}, 10);
    ASSERT_EQ(tr.steps.size(), 50u);
    EXPECT_EQ(tr.steps.front().b, 1.0);
    EXPECT_DOUBLE_EQ(tr.steps[30].b, scaling_factor(20.0 / 50.0, ScalingSchedule{}));
    for (const TraceStep& st : tr.steps) EXPECT_DOUBLE_EQ(st.eps_norm, l2_norm(*st.eps_hat));
}

TEST(Trajectory, SnapshotStride) {
    const NoiseSchedule s = sched50();
    const ToyDiT model(toy_config());
    TraceOptions opts;
    opts.snapshot_stride = 5;
    const Trace tr = run_trajectory(model, NoCachePolicy{}, std::nullopt, s, {}, 11, opts);
    int snaps = 0;
    for (const TraceStep& st : tr.steps) snaps += st.x_t.has_value();
    EXPECT_EQ(snaps, 10);
    EXPECT_TRUE(tr.find_step(50)->x_t.has_value());
    EXPECT_FALSE(tr.find_step(49)->x_t.has_value());
}

TEST(Trajectory, DeterministicAcrossThreadCounts) {
    const NoiseSchedule s = sched50();
    const ToyDiT model(toy_config());
    const std::vector<std::uint64_t> seeds{5, 1, 9, 3, 7};
    const auto one = run_batch(model, IntervalBothPolicy{3}, ScalingSchedule{}, s, {}, seeds, {}, 1);
    const auto four = run_batch(model, IntervalBothPolicy{3}, ScalingSchedule{}, s, {}, seeds, {}, 4);
    ASSERT_EQ(one.size(), four.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
        EXPECT_EQ(one[i].seed, seeds[i]);
        EXPECT_TRUE(same_trajectory(one[i], four[i]));
    }
    EXPECT_FALSE(same_trajectory(one[0], one[1]));
}

TEST(Trajectory, InvalidTableAbortsWithStep) {
    const NoiseSchedule s = sched50();
    const ToyDiT model(toy_config());
    CacheTable t(50, None);
    t.set(49, Mlp);
    try {
        run_trajectory(model, TableDrivenPolicy{t}, std::nullopt, s, {}, 1);
        FAIL();
    } catch (const InvalidTableError& e) {
        EXPECT_EQ(e.step(), 49);
    }
}

TEST(ParallelFor, PropagatesExceptions) {
    EXPECT_THROW(parallel_for(10, 3,
                              [](std::size_t i) {
                                  if (i == 6) throw std::runtime_error("boom");
                              }),
                 std::runtime_error);
}

// Terminal variance error of N(0, I) samples from the exact denoiser grows
// with the reuse interval.
double terminal_variance_error(const AnalyticDenoiser& d, const NoiseSchedule& s, int n, int seeds) {
    std::vector<std::uint64_t> ids(static_cast<std::size_t>(seeds));
    for (int i = 0; i < seeds; ++i) ids[static_cast<std::size_t>(i)] = static_cast<std::uint64_t>(i);
    TraceOptions opts;
    opts.snapshot_stride = 0;
    RunningMoments m;
    for (const Trace& tr : run_batch(d, IntervalBothPolicy{n}, std::nullopt, s, {}, ids, opts)) m.push(tr.x0.values());
    return std::abs(m.result().variance - 1.0);
}

TEST(Trajectory, ExposureBiasGrowsWithInterval) {
    const NoiseSchedule s = sched50();
    const AnalyticDenoiser d(GaussianMixturePrior::standard_normal(Shape{16, 16, 1}), s);
    double prev = 0.0;
    for (int n : {1, 2, 4, 8}) {
        const double err = terminal_variance_error(d, s, n, 1000);
        EXPECT_GE(err, prev) << "N=" << n;
        prev = err;
    }
}

}  // namespace
}  // namespace febcache
