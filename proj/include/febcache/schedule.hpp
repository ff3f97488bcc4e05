// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "febcache/numerics.hpp"

namespace febcache {

/// Discrete DDPM noise schedule with 1-based step indexing. Index 0 is the
/// clean-data boundary: alpha_bar(0) == 1.
class NoiseSchedule {
public:
    /// Builds the derived tables from per-step betas (betas[0] is step 1).
    static NoiseSchedule from_betas(std::vector<double> betas) {
        if (betas.empty()) throw std::invalid_argument("noise schedule needs at least one step");
        NoiseSchedule s;
        s.beta_.push_back(0.0);
        s.alpha_.push_back(1.0);
        s.alpha_bar_.push_back(1.0);
        s.beta_tilde_.push_back(0.0);
        for (std::size_t i = 0; i < betas.size(); ++i) {
            const double b = betas[i];
            if (!(b > 0.0 && b < 1.0)) {
                throw std::invalid_argument("beta at step " + std::to_string(i + 1) + " is outside (0, 1)");
            }
            const double a = 1.0 - b;
            const double ab = s.alpha_bar_.back() * a;
            const double ab_prev = s.alpha_bar_.back();
            s.beta_.push_back(b);
            s.alpha_.push_back(a);
            s.alpha_bar_.push_back(ab);
            s.beta_tilde_.push_back((1.0 - ab_prev) / (1.0 - ab) * b);
        }
        return s;
    }

    int steps() const noexcept { return static_cast<int>(beta_.size()) - 1; }

    double beta(int t) const { return beta_.at(checked(t, 1)); }
    double alpha(int t) const { return alpha_.at(checked(t, 1)); }
    double alpha_bar(int t) const { return alpha_bar_.at(checked(t, 0)); }
    /// Posterior variance of q(x_{t-1} | x_t, x_0).
    double beta_tilde(int t) const { return beta_tilde_.at(checked(t, 1)); }

    std::span<const double> betas() const noexcept { return std::span(beta_).subspan(1); }

private:
    NoiseSchedule() = default;

    std::size_t checked(int t, int lo) const {
        if (t < lo || t > steps()) {
            throw std::invalid_argument("step " + std::to_string(t) + " outside [" + std::to_string(lo) +
                                        ", " + std::to_string(steps()) + "]");
        }
        return static_cast<std::size_t>(t);
    }

    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
    std::vector<double> beta_tilde_;
};

/// Betas linearly interpolated from beta_start (step 1) to beta_end (step T).
inline NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("linear schedule requires 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
    return NoiseSchedule::from_betas(std::move(betas));
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Grid q_sample(const Grid& x0, int t, const Grid& eps, const NoiseSchedule& s) {
    require_same_shape(x0.shape(), eps.shape(), "q_sample");
    const double ab = s.alpha_bar(t);
    if (t < 1) throw std::invalid_argument("q_sample: t must be >= 1");
    return lincomb(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

/// Weights of x_t and x0 in the posterior mean mu_tilde(x_t, x0).
struct PosteriorCoefficients {
    double x_t = 0.0;
    double x0 = 0.0;
};

inline PosteriorCoefficients posterior_coefficients(int t, const NoiseSchedule& s) {
    if (t < 2) {
        throw std::invalid_argument("posterior_moments: t must be >= 2 (t == 1 is the data step)");
    }
    const double ab = s.alpha_bar(t);
    const double ab_prev = s.alpha_bar(t - 1);
    return {std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab), std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab)};
}

struct PosteriorMoments {
    Grid mean;
    double variance = 0.0;
};

inline PosteriorMoments posterior_moments(const Grid& x_t, const Grid& x0_hat, int t, const NoiseSchedule& s) {
    const PosteriorCoefficients c = posterior_coefficients(t, s);
    return {lincomb(c.x_t, x_t, c.x0, x0_hat), s.beta_tilde(t)};
}

// ---------------------------------------------------------------------------

/// Stage-dependent noise scaling b(t). High-noise steps (t_norm >= t_thre)
/// relax from b_high toward 1 at t_norm = 1; low-noise steps fall from b_high
/// toward b_low.
struct ScalingSchedule {
    double b_high = 0.98;
    double b_low = 0.96;
    double t_thre = 0.4;

    void validate() const {
        if (!(b_high > 0.0 && b_high <= 1.0 && b_low > 0.0 && b_low <= 1.0)) {
            throw std::invalid_argument("scaling bases must lie in (0, 1]");
        }
        if (b_low > b_high) throw std::invalid_argument("scaling requires b_low <= b_high");
        if (!(t_thre > 0.0 && t_thre < 1.0)) throw std::invalid_argument("scaling t_thre must lie in (0, 1)");
    }
};

inline double scaling_factor(double t_norm, const ScalingSchedule& sch) {
    if (!(t_norm >= 0.0 && t_norm <= 1.0)) {
        throw std::invalid_argument("scaling_factor: t_norm outside [0, 1]");
    }
    const double span = 1.0 - sch.t_thre;
    if (t_norm >= sch.t_thre) {
        return sch.b_high + (1.0 - sch.b_high) * std::exp(-5.0 * (1.0 - t_norm) / span);
    }
    return sch.b_low + (sch.b_high - sch.b_low) * std::exp(5.0 * (t_norm - sch.t_thre) / span);
}

/// Cache error threshold delta(t) = a + b * t / T.
struct ThresholdSchedule {
    double a = 0.05;
    double b = 0.15;
};

inline double threshold(int t, int total_steps, const ThresholdSchedule& th) {
    if (t < 0 || t >= total_steps) {
        throw std::invalid_argument("threshold: t must lie in [0, T)");
    }
    if (th.b == 0.0) return th.a;  // keeps a == +inf well-defined
    return th.a + th.b * static_cast<double>(t) / static_cast<double>(total_steps);
}

}  // namespace febcache
