// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "febcache/analysis.hpp"
#include "febcache/analytic.hpp"
#include "febcache/bias.hpp"
#include "febcache/cache.hpp"
#include "febcache/sampler.hpp"
#include "febcache/schedule.hpp"
#include "febcache/tablegen.hpp"
#include "febcache/toy_dit.hpp"
#include "test_predictors.hpp"
#include "test_support.hpp"

namespace febcache {
namespace {

using enum CacheTag;

/// Collects failed checks for one criterion.
class Check {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok && failures_.size() < 5) failures_.push_back(what);
        failed_ = failed_ || !ok;
    }
    void near(double got, double want, double tol, const std::string& what) {
        std::ostringstream os;
        os.precision(12);
        os << what << ": got " << got << ", want " << want << " +- " << tol;
        expect(std::abs(got - want) <= tol, os.str());
    }
    void note(const std::string& s) { notes_ += (notes_.empty() ? "" : "; ") + s; }
    bool failed() const { return failed_; }
    std::string summary() const {
        std::string s = notes_;
        for (const std::string& f : failures_) s += (s.empty() ? "" : "; ") + f;
        return s;
    }

private:
    bool failed_ = false;
    std::vector<std::string> failures_;
    std::string notes_;
};

std::string fmt(double v, int precision = 6) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

NoiseSchedule sched50() { return build_linear_schedule(50, 1e-4, 0.02); }

// ---------------------------------------------------------------------------

void variance_accumulation(Check& c) {
    const BiasReport r = make_bias_report(0.8, 5);
    c.near(accumulated_variance(0.8, 5), 18.1072, 1e-4, "total variance");
    c.near(covariance_sum(0.8, 5), 6.5536, 1e-4, "covariance sum");
    c.near(r.std_dev, 4.2553, 1e-3, "std");
    c.near(r.amplification, 3.62, 0.01, "amplification");
    c.note("total_var=" + fmt(r.total_var) + " std=" + fmt(r.std_dev) + " ratio=" + fmt(r.amplification));
}

void monte_carlo_agreement(Check& c) {
    double worst = 0.0;
    for (double rho : {0.0, 0.3, 0.8, 0.95}) {
        for (int n : {2, 5, 10}) {
            SeededRng rng(1000 + static_cast<std::uint64_t>(rho * 100), static_cast<std::uint64_t>(n));
            const double sim = simulate_correlated_errors(rho, n, 1000000, rng).variance;
            // Closed form summed directly over the covariance matrix.
            double closed = 0.0;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) closed += std::pow(rho, std::abs(i - j));
            }
            const double rel = std::abs(sim - closed) / closed;
            worst = std::max(worst, rel);
            c.expect(rel <= 0.02, "rho=" + fmt(rho) + " N=" + std::to_string(n) + " rel err " + fmt(rel));
        }
    }
    c.note("worst relative error " + fmt(worst, 3));
}

void rho_one_identity(Check& c) {
    for (int n = 1; n <= 10; ++n) {
        c.expect(accumulated_variance(1.0, n) == static_cast<double>(n * n), "N=" + std::to_string(n));
    }
}

void scaling_endpoints(Check& c) {
    const ScalingSchedule sch{};
    c.expect(sch.b_low == 0.96 && sch.b_high == 0.98, "default parameters are 0.96/0.98");
    c.expect(scaling_factor(1.0, sch) == 1.0, "b(1) == 1 exactly");
    // 0.98 + 0.02 e^-5 and 0.96 + 0.02 e^(-10/3), evaluated at 30 digits.
    c.near(scaling_factor(0.4, sch), 0.980134758939981709342, 1e-9, "b(0.4)");
    c.near(scaling_factor(0.0, sch), 0.960713479866945047952, 1e-9, "b(0)");
}

void posterior_correctness(Check& c) {
    const NoiseSchedule s = build_linear_schedule(1000, 1e-4, 0.02);
    SeededRng rng(31337, 1);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        const int t = 2 + static_cast<int>(rng.uniform() * 998.0);
        const double x0 = k == 0 ? 0.3 : 2.0 * rng.normal();
        const Grid x0g(Shape{1, 1, 1}, x0);
        const Grid x_t = q_sample(x0g, t, gaussian_sample(rng, Shape{1, 1, 1}), s);
        const PosteriorMoments p = posterior_moments(x_t, x0g, t, s);
        const testing::GridMoments o = testing::posterior_grid_oracle(s, t, x_t[0], x0);
        worst = std::max({worst, std::abs(p.mean[0] - o.mean), std::abs(p.variance - o.variance)});
        c.near(p.mean[0], o.mean, 1e-4, "posterior mean t=" + std::to_string(t));
        c.near(p.variance, o.variance, 1e-4, "posterior variance t=" + std::to_string(t));
    }
    c.note("worst grid-oracle gap " + fmt(worst, 3));

    // e = 0: x_{t-1} drawn through the posterior from the exact x0 over 1e4 trials.
    for (int t : {2, 100, 500, 1000}) {
        const Shape shape{100, 100, 1};
        const Grid x0g(shape, 0.8);
        const Grid x_t = q_sample(x0g, t, gaussian_sample(rng, shape), s);
        PosteriorMoments p = posterior_moments(x_t, x0g, t, s);
        for (double& v : p.mean.values()) v += std::sqrt(p.variance) * rng.normal();
        const Moments m = moments(p.mean.values());
        const double target = 1.0 - s.alpha_bar(t - 1);
        c.near(m.variance / target, 1.0, 0.03, "marginal variance ratio t=" + std::to_string(t));
    }
}

void cache_equivalences(Check& c) {
    const NoiseSchedule s = sched50();
    ToyDiTConfig mc;
    mc.grid = {8, 8, 2};
    mc.d_model = 32;
    const ToyDiT toy(mc);
    const AnalyticDenoiser analytic(GaussianMixturePrior::standard_normal(Shape{8, 8, 1}), s);
    for (const NoisePredictor* pred : {static_cast<const NoisePredictor*>(&toy), static_cast<const NoisePredictor*>(&analytic)}) {
        for (std::uint64_t seed : {3u, 4u}) {
            const Trace base = run_trajectory(*pred, NoCachePolicy{}, ScalingSchedule{}, s, {}, seed);
            const Trace table = run_trajectory(*pred, TableDrivenPolicy{CacheTable(50, None)}, ScalingSchedule{}, s, {}, seed);
            const Trace one = run_trajectory(*pred, IntervalBothPolicy{1}, ScalingSchedule{}, s, {}, seed);
            c.expect(same_trajectory(base, table), pred->identity() + ": all-None table differs from no-cache");
            c.expect(same_trajectory(base, one), pred->identity() + ": interval 1 differs from no-cache");

            for (const CachePolicy& policy : {CachePolicy{IntervalBothPolicy{3}}, CachePolicy{IntervalSeparatePolicy{2, 3}}}) {
                const Trace cached = run_trajectory(*pred, policy, ScalingSchedule{}, s, {}, seed);
                const CacheTable plan = resolve_plan(policy, 50);
                int first_reuse = 0;
                for (int t = 50; t >= 1 && first_reuse == 0; --t) {
                    if (plan.at(t) != None) first_reuse = t;
                }
                // States agree up to and including the first reuse step
                // (where the stale prediction is consumed) and differ after.
                int first_diff = 0;
                for (std::size_t i = 0; i < base.steps.size() && first_diff == 0; ++i) {
                    if (*base.steps[i].x_t != *cached.steps[i].x_t) first_diff = base.steps[i].step;
                }
                const bool eps_same_before = [&] {
                    for (std::size_t i = 0; i < base.steps.size(); ++i) {
                        if (base.steps[i].step <= first_reuse) break;
                        if (*base.steps[i].eps_hat != *cached.steps[i].eps_hat) return false;
                    }
                    return true;
                }();
                const TraceStep* at_reuse = cached.find_step(first_reuse);
                const TraceStep* base_reuse = base.find_step(first_reuse);
                c.expect(first_diff == first_reuse - 1, pred->identity() + " " + describe(policy) + ": states diverge at step " +
                                                            std::to_string(first_diff) + ", first reuse " +
                                                            std::to_string(first_reuse));
                c.expect(eps_same_before && *at_reuse->eps_hat != *base_reuse->eps_hat,
                         describe(policy) + ": predictions must first differ at the reuse step");
            }
        }
    }
}

void tablegen_determinism(Check& c) {
    ToyDiTConfig mc;
    mc.grid = {8, 8, 4};
    mc.d_model = 32;
    const ToyDiT model(mc);
    const NoiseSchedule s = build_linear_schedule(30, 1e-4, 0.02);

    TableGenConfig inf;
    inf.samples = 3;
    inf.threshold = {std::numeric_limits<double>::infinity(), 0.0};
    const auto h_inf = generate_table(model, s, inf).aggregate.table.histogram();
    c.expect(h_inf[static_cast<int>(Both)] == 28 && h_inf[static_cast<int>(None)] == 2,
             "delta=inf histogram both=" + std::to_string(h_inf[3]) + " none=" + std::to_string(h_inf[0]));

    TableGenConfig zero;
    zero.samples = 3;
    zero.threshold = {0.0, 0.0};
    c.expect(generate_table(model, s, zero).aggregate.table == CacheTable(30, None), "delta=0 table is not all None");

    TableGenConfig cfg;
    cfg.samples = 6;
    cfg.seed = 99;
    cfg.threshold = {0.05, 0.15};
    const std::string ref = table_to_json(generate_table(model, s, cfg, 1).aggregate.table).dump();
    for (unsigned threads : {1u, 2u, 4u}) {
        c.expect(table_to_json(generate_table(model, s, cfg, threads).aggregate.table).dump() == ref,
                 "table bytes differ with " + std::to_string(threads) + " threads");
    }

    // c = 0.5 linear predictor, DDIM, T = 8 against the closed-form schedule.
    const NoiseSchedule s8 = build_linear_schedule(8, 1e-4, 0.02);
    const Shape shape{4, 4, 1};
    const testing::LinearPredictor linear(shape, 0.5);
    TableGenConfig lc;
    lc.samples = 1;
    lc.threshold = {0.05, 0.15};
    lc.sampler = {SamplerKind::Ddim, 0};
    int both = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SeededRng rng(seed, 1);
        SeededRng probe = rng;
        const double norm_xT = l2_norm(gaussian_sample(probe, shape));
        const auto want = testing::linear_oracle(s8, 0.5, norm_xT, lc.threshold);
        const CacheTable got = generate_table_single(linear, s8, lc, rng).table;
        c.expect(got.execution_order() == want, "linear oracle mismatch for seed " + std::to_string(seed));
        both += got.histogram()[static_cast<int>(Both)];
    }
    c.expect(both > 0, "linear fixture never exercises Both");
}

double terminal_variance_error(const NoisePredictor& d, const NoiseSchedule& s, const CachePolicy& policy,
                               const std::optional<ScalingSchedule>& scaling, std::uint64_t first_seed, int count) {
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < count; ++i) seeds.push_back(first_seed + static_cast<std::uint64_t>(i));
    TraceOptions opts;
    opts.snapshot_stride = 0;
    RunningMoments m;
    for (const Trace& tr : run_batch(d, policy, scaling, s, {}, seeds, opts)) m.push(tr.x0.values());
    return std::abs(m.result().variance - 1.0);
}

void exposure_bias_trend(Check& c) {
    const NoiseSchedule s = sched50();
    const AnalyticDenoiser d(GaussianMixturePrior::standard_normal(Shape{16, 16, 1}), s);
    double prev = 0.0;
    std::string curve;
    for (int n : {1, 2, 4, 8}) {
        const double err = terminal_variance_error(d, s, IntervalBothPolicy{n}, std::nullopt, 0, 1000);
        c.expect(err >= prev, "error decreased at N=" + std::to_string(n));
        curve += (curve.empty() ? "" : " ") + std::string("N") + std::to_string(n) + "=" + fmt(err, 4);
        prev = err;
    }
    c.note(curve);

    // Closed form: the bias part of Var(x_hat_{t-N}) with the landing step
    // held fixed is N^2 times the single-step exposure term.
    const double e = 0.37;
    for (int landing : {5, 20, 40}) {
        // Coefficient sqrt(abar_L) beta_{L+1} / (1 - abar_{L+1}) from the raw linear betas.
        long double ab = 1.0L;
        long double ab_next = 1.0L;
        for (int i = 1; i <= landing + 1; ++i) {
            const long double beta = 1e-4L + (0.02L - 1e-4L) * (i - 1) / 49.0L;
            ab_next *= 1.0L - beta;
            if (i == landing) ab = ab_next;
        }
        const long double beta_next = 1e-4L + (0.02L - 1e-4L) * landing / 49.0L;
        const long double coeff = std::sqrt(ab) * beta_next / (1.0L - ab_next);
        const double single = static_cast<double>(coeff * coeff * e * e);
        for (int n = 1; n <= 8 && landing + n <= 50; ++n) {
            const double bias = var_xhat(s, landing + n, n, e) - (1.0 - s.alpha_bar(landing));
            c.near(bias / (n * n * single), 1.0, 1e-9, "N^2 law L=" + std::to_string(landing) + " N=" + std::to_string(n));
        }
    }
}

void mitigation(Check& c) {
    const NoiseSchedule s = sched50();
    const AnalyticDenoiser d(GaussianMixturePrior::standard_normal(Shape{16, 16, 1}), s);
    const ScalingSchedule scaling{};
    int wins = 0;
    const int batches = 100;
    for (int b = 0; b < batches; ++b) {
        const std::uint64_t first = 100000 + static_cast<std::uint64_t>(b) * 10;
        const double scaled = terminal_variance_error(d, s, IntervalBothPolicy{4}, scaling, first, 10);
        const double plain = terminal_variance_error(d, s, IntervalBothPolicy{4}, std::nullopt, first, 10);
        wins += scaled < plain;
    }
    c.note("scaled error smaller in " + std::to_string(wins) + "/" + std::to_string(batches) + " batches");
    c.expect(wins >= 90, "needs at least 90 wins");
}

void fft_and_cost(Check& c) {
    for (const Shape shape : {Shape{4, 4, 1}, Shape{8, 16, 3}, Shape{32, 32, 1}}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const Grid x = testing::random_grid(shape, seed);
            for (double cutoff : {0.1, 0.25, 0.7}) {
                const BandEnergy e = band_energy(x, cutoff);
                c.near((e.low * e.low + e.high * e.high) / squared_norm(x.values()), 1.0, 1e-9,
                       "Parseval " + shape.to_string());
            }
        }
    }
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ComplexGrid in = to_complex(testing::random_grid(Shape{4, 4, 1}, seed + 10));
        const ComplexGrid fast = fft2d(in);
        const ComplexGrid slow = testing::naive_dft2(in);
        double gap = 0.0;
        for (std::size_t i = 0; i < fast.values().size(); ++i) gap = std::max(gap, std::abs(fast[i] - slow[i]));
        c.expect(gap <= 1e-10, "4x4 FFT differs from naive DFT by " + fmt(gap, 3));
    }
    // One block, d = 64, 16 tokens of 16 values, 4 heads:
    //   attention 4*16*64*64 + 2*4*16*16*16 = 294912
    //   MLP       2*16*64*256                 = 524288
    //   overhead  16*16*64 + 2*64*64 + 16*64*16 = 40960
    ToyDiTConfig cfg;
    cfg.grid = {8, 8, 4};
    cfg.patch = 2;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.n_blocks = 1;
    const ComputeCost cost = compute_cost(cfg, None);
    c.expect(cost.attn == 294912 && cost.mlp == 524288 && cost.overhead == 40960,
             "hand-counted block cost mismatch: " + std::to_string(cost.attn) + "/" + std::to_string(cost.mlp) + "/" +
                 std::to_string(cost.overhead));
    c.expect(cost.total() == 860160, "total MACs " + std::to_string(cost.total()));
}

void cost_ledger(Check& c) {
    const NoiseSchedule s = sched50();
    ToyDiTConfig cfg;
    cfg.grid = {8, 8, 4};
    cfg.patch = 2;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.n_blocks = 1;
    const ToyDiT model(cfg);
    TraceOptions opts;
    opts.snapshot_stride = 0;
    const std::vector<CachePolicy> policies{NoCachePolicy{}, IntervalBothPolicy{2}, IntervalBothPolicy{5},
                                            IntervalSeparatePolicy{2, 3}, IntervalSeparatePolicy{4, 1}};
    for (const CachePolicy& p : policies) {
        const Trace tr = run_trajectory(model, p, ScalingSchedule{}, s, {}, 5, opts);
        std::uint64_t by_step = 0;
        std::uint64_t by_tag = 0;
        for (const TraceStep& st : tr.steps) {
            by_step += st.cost.total();
            by_tag += compute_cost(cfg, st.tag).total();
        }
        c.expect(tr.total_cost().total() == by_step && by_step == by_tag, describe(p) + ": ledger does not add up");
    }

    // IntervalBoth(2), T = 50: 26 fresh steps at 860160 MACs and 24 reuse
    // steps at the 40960 overhead, against 50 fresh steps.
    const double expected = (26.0 * 860160.0 + 24.0 * 40960.0) / (50.0 * 860160.0);
    const Trace base = run_trajectory(model, NoCachePolicy{}, std::nullopt, s, {}, 1, opts);
    const Trace cached = run_trajectory(model, IntervalBothPolicy{2}, std::nullopt, s, {}, 1, opts);
    const double ratio = speedup_report(std::span(&cached, 1), base).front().mac_ratio;
    c.near(ratio, expected, 1e-12, "interval 2 MAC ratio");
    c.note("MAC ratio " + fmt(ratio, 10) + " (expected " + fmt(expected, 10) + ")");
}

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;  // 0 means no runtime bound
    std::function<void(Check&)> body;
};

}  // namespace
}  // namespace febcache

int main() {
    using namespace febcache;
    const std::vector<Criterion> criteria{
        {1, "variance accumulation exactness", 1.0, variance_accumulation},
        {2, "Monte-Carlo agreement with the closed form", 30.0, monte_carlo_agreement},
        {3, "rho = 1 gives N^2", 0.0, rho_one_identity},
        {4, "scaling schedule endpoints", 0.0, scaling_endpoints},
        {5, "posterior correctness", 0.0, posterior_correctness},
        {6, "cache equivalences and first divergence", 0.0, cache_equivalences},
        {7, "table generation determinism and degenerate tables", 0.0, tablegen_determinism},
        {8, "exposure-bias amplification trend", 120.0, exposure_bias_trend},
        {9, "scaling mitigates cached exposure bias", 0.0, mitigation},
        {10, "FFT, Parseval and MAC count", 0.0, fft_and_cost},
        {11, "cost ledger", 0.0, cost_ledger},
    };
    int failures = 0;
    for (const Criterion& cr : criteria) {
        Check check;
        const auto start = std::chrono::steady_clock::now();
        try {
            cr.body(check);
        } catch (const std::exception& e) {
            check.expect(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (cr.budget_seconds > 0.0) {
            check.expect(secs < cr.budget_seconds, "runtime " + fmt(secs, 3) + " s over budget " + fmt(cr.budget_seconds) + " s");
        }
        const bool ok = !check.failed();
        failures += !ok;
        const std::string summary = check.summary();
        std::printf("%s criterion %2d: %s (%.2f s)%s%s\n", ok ? "PASS" : "FAIL", cr.id, cr.name, secs,
                    summary.empty() ? "" : " ", summary.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
