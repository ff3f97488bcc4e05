// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "febcache/numerics.hpp"
#include "febcache/sampler.hpp"
#include "febcache/schedule.hpp"

namespace febcache {

namespace detail {

inline void check_correlation(double rho, int n) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("correlation rho must lie in [0, 1]");
    if (n < 1) throw std::invalid_argument("cached step count N must be >= 1");
}

}  // namespace detail

/// sum_{d=1}^{N-1} (N - d) rho^d: the off-diagonal covariance mass of N
/// unit-variance AR(1) terms.
inline double covariance_sum(double rho, int n) {
    detail::check_correlation(rho, n);
    double total = 0.0;
    double power = 1.0;
    for (int d = 1; d < n; ++d) {
        power *= rho;
        total += static_cast<double>(n - d) * power;
    }
    return total;
}

/// Var(sum of N correlated unit errors) = N + 2 * covariance_sum(rho, N).
inline double accumulated_variance(double rho, int n) { return n + 2.0 * covariance_sum(rho, n); }

struct BiasReport {
    double rho = 0.0;
    int n = 1;
    double covariance_sum = 0.0;
    double total_var = 0.0;
    double std_dev = 0.0;
    double amplification = 1.0;  // total_var / N, the ratio against uncorrelated errors
};

inline BiasReport make_bias_report(double rho, int n) {
    BiasReport r;
    r.rho = rho;
    r.n = n;
    r.covariance_sum = covariance_sum(rho, n);
    r.total_var = n + 2.0 * r.covariance_sum;
    r.std_dev = std::sqrt(r.total_var);
    r.amplification = r.total_var / n;
    return r;
}

inline nlohmann::json to_json(const BiasReport& r) {
    return {{"rho", r.rho},           {"N", r.n},         {"covariance_sum", r.covariance_sum},
            {"total_var", r.total_var}, {"std", r.std_dev}, {"amplification_ratio", r.amplification}};
}

/// Squared exposure-bias contribution to Var(x_hat_{t-1}) from an x0
/// prediction error of scale e at step t.
inline double exposure_bias_term(const NoiseSchedule& s, int t, double e) {
    if (t < 2 || t > s.steps()) throw std::invalid_argument("exposure_bias_term: t must lie in [2, T]");
    if (!(e >= 0.0)) throw std::invalid_argument("exposure_bias_term: e must be >= 0");
    const double coeff = std::sqrt(s.alpha_bar(t - 1)) * s.beta(t) / (1.0 - s.alpha_bar(t));
    return (coeff * e) * (coeff * e);
}

/// Var(x_hat_{t-N}) = N^2 (sqrt(abar_{t-N}) beta_{t-N+1} / (1 - abar_{t-N+1}) e)^2 + 1 - abar_{t-N}
inline double var_xhat(const NoiseSchedule& s, int t, int n, double e) {
    if (n < 1) throw std::invalid_argument("var_xhat: N must be >= 1");
    if (t - n < 1 || t > s.steps()) throw std::invalid_argument("var_xhat: need 1 <= t - N and t <= T");
    if (!(e >= 0.0)) throw std::invalid_argument("var_xhat: e must be >= 0");
    const int landing = t - n;
    const double coeff = std::sqrt(s.alpha_bar(landing)) * s.beta(landing + 1) / (1.0 - s.alpha_bar(landing + 1));
    const double bias = static_cast<double>(n) * coeff * e;
    return bias * bias + 1.0 - s.alpha_bar(landing);
}

struct CorrelatedSimulation {
    double variance = 0.0;               // sample variance of the N-term sum
    std::vector<double> term_variances;  // per-term marginal variance
};

/// Monte-Carlo of the AR(1) chain e_k = rho e_{k-1} + sqrt(1 - rho^2) eta_k
/// with e_1 ~ N(0, 1), summing N terms per trial.
inline CorrelatedSimulation simulate_correlated_errors(double rho, int n, std::uint64_t trials, SeededRng& rng) {
    detail::check_correlation(rho, n);
    if (trials < 1) throw std::invalid_argument("simulate_correlated_errors: trials must be >= 1");
    const double innovation = std::sqrt(1.0 - rho * rho);
    RunningMoments sum_moments;
    std::vector<RunningMoments> per_term(static_cast<std::size_t>(n));
    for (std::uint64_t i = 0; i < trials; ++i) {
        double e = rng.normal();
        double sum = e;
        per_term[0].push(e);
        for (int k = 1; k < n; ++k) {
            e = rho * e + innovation * rng.normal();
            sum += e;
            per_term[static_cast<std::size_t>(k)].push(e);
        }
        sum_moments.push(sum);
    }
    CorrelatedSimulation out;
    out.variance = sum_moments.result().variance;
    for (const RunningMoments& m : per_term) out.term_variances.push_back(m.result().variance);
    return out;
}

/// Per-step x0 prediction error scale from traces. At each snapshot step the
/// reconstruction x0_hat = (x_t - sqrt(1 - abar) b eps) / sqrt(abar) is
/// compared with the reference and the elementwise standard deviation of the
/// difference is reported, pooled over all traces. Output follows the
/// execution order of the first trace.
inline std::vector<double> estimate_e(std::span<const Trace> traces, const Grid& x0_ref, const NoiseSchedule& s) {
    if (traces.empty()) throw std::invalid_argument("estimate_e: no traces");
    const std::size_t len = traces.front().steps.size();
    std::vector<RunningMoments> acc(len);
    for (const Trace& tr : traces) {
        if (tr.steps.size() != len) throw std::invalid_argument("estimate_e: traces differ in length");
        for (std::size_t i = 0; i < len; ++i) {
            const TraceStep& st = tr.steps[i];
            if (!st.x_t || !st.eps_hat) {
                throw std::invalid_argument("estimate_e: trace lacks a snapshot at step " + std::to_string(st.step));
            }
            const Grid x0_hat = predict_x0(*st.x_t, st.timestep, *st.eps_hat, st.b, s);
            acc[i].push(sub(x0_hat, x0_ref).values());
        }
    }
    std::vector<double> e(len);
    for (std::size_t i = 0; i < len; ++i) e[i] = std::sqrt(acc[i].result().variance);
    return e;
}

inline std::vector<double> estimate_e(const Trace& trace, const Grid& x0_ref, const NoiseSchedule& s) {
    return estimate_e(std::span<const Trace>(&trace, 1), x0_ref, s);
}

}  // namespace febcache
