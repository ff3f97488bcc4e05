// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "febcache/model.hpp"
#include "febcache/numerics.hpp"
#include "febcache/schedule.hpp"

namespace febcache {

/// Mixture of isotropic Gaussians over x0. A component with variance 0 is a
/// point mass.
struct GaussianMixturePrior {
    struct Component {
        double weight = 1.0;
        Grid mean;
        double variance = 1.0;
    };

    std::vector<Component> components;

    static GaussianMixturePrior standard_normal(Shape shape) { return {{{1.0, Grid(shape, 0.0), 1.0}}}; }
    static GaussianMixturePrior point_mass(Grid at) { return {{{1.0, std::move(at), 0.0}}}; }

    Shape shape() const { return components.at(0).mean.shape(); }

    void validate() const {
        if (components.empty()) throw std::invalid_argument("mixture prior has no components");
        double total = 0.0;
        for (const Component& c : components) {
            if (!(c.weight > 0.0)) throw std::invalid_argument("mixture weights must be positive");
            if (!(c.variance >= 0.0)) throw std::invalid_argument("mixture variances must be >= 0");
            require_same_shape(c.mean.shape(), components.front().mean.shape(), "mixture component mean");
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("mixture weights must sum to 1");
    }
};

/// Exact posterior responsibilities p(k | x_t) for each mixture component.
inline std::vector<double> mixture_responsibilities(const Grid& x_t, int t, const GaussianMixturePrior& prior,
                                                    const NoiseSchedule& s) {
    const double ab = s.alpha_bar(t);
    const double sqrt_ab = std::sqrt(ab);
    const double dim = static_cast<double>(x_t.size());
    std::vector<double> log_w;
    log_w.reserve(prior.components.size());
    for (const auto& c : prior.components) {
        const double var = ab * c.variance + (1.0 - ab);
        double dist = 0.0;
        for (std::size_t i = 0; i < x_t.size(); ++i) {
            const double d = x_t[i] - sqrt_ab * c.mean[i];
            dist += d * d;
        }
        log_w.push_back(std::log(c.weight) - 0.5 * dim * std::log(2.0 * std::numbers::pi * var) - 0.5 * dist / var);
    }
    const double norm = log_sum_exp(log_w);
    for (double& v : log_w) v = std::exp(v - norm);
    return log_w;
}

/// E[x0 | x_t] under the mixture prior.
inline Grid posterior_mean_x0(const Grid& x_t, int t, const GaussianMixturePrior& prior, const NoiseSchedule& s) {
    require_same_shape(x_t.shape(), prior.shape(), "analytic denoiser input");
    const double ab = s.alpha_bar(t);
    const double sqrt_ab = std::sqrt(ab);
    const std::vector<double> resp = mixture_responsibilities(x_t, t, prior, s);
    Grid mean(x_t.shape(), 0.0);
    for (std::size_t k = 0; k < prior.components.size(); ++k) {
        const auto& c = prior.components[k];
        const double var = ab * c.variance + (1.0 - ab);
        const double wx = sqrt_ab * c.variance / var;
        const double wm = (1.0 - ab) / var;
        for (std::size_t i = 0; i < x_t.size(); ++i) mean[i] += resp[k] * (wx * x_t[i] + wm * c.mean[i]);
    }
    return mean;
}

/// Optimal noise prediction (x_t - sqrt(abar_t) E[x0|x_t]) / sqrt(1 - abar_t).
inline Grid analytic_eps(const Grid& x_t, int t, const GaussianMixturePrior& prior, const NoiseSchedule& s) {
    const double ab = s.alpha_bar(t);
    if (!(1.0 - ab > 0.0)) throw std::invalid_argument("analytic_eps: 1 - alpha_bar is zero");
    const Grid x0 = posterior_mean_x0(x_t, t, prior, s);
    return lincomb(1.0 / std::sqrt(1.0 - ab), x_t, -std::sqrt(ab) / std::sqrt(1.0 - ab), x0);
}

/// Closed-form denoiser behind the NoisePredictor interface. It has no
/// transformer sublayers, so the cacheable parts are defined spectrally: the
/// "attention" slot holds the low-frequency band of the prediction and the
/// "MLP" slot the high-frequency remainder. Reusing a slot substitutes the
/// stored band for the fresh one.
class AnalyticDenoiser final : public NoisePredictor {
public:
    AnalyticDenoiser(GaussianMixturePrior prior, NoiseSchedule schedule, double band_cutoff = 0.25)
        : prior_(std::move(prior)), schedule_(std::move(schedule)), cutoff_(band_cutoff) {
        prior_.validate();
        check_cutoff(cutoff_);
        const Shape s = prior_.shape();
        if (!is_power_of_two(s.height) || !is_power_of_two(s.width)) {
            throw std::invalid_argument("analytic denoiser grid must be a power of two");
        }
    }

    const GaussianMixturePrior& prior() const noexcept { return prior_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }

    Shape shape() const override { return prior_.shape(); }
    CacheState make_cache() const override { return CacheState(1); }

    /// Nominal cost units: one unit per element and component for each band.
    ComputeCost cost(CacheTag tag) const override {
        const std::uint64_t unit = shape().size() * prior_.components.size();
        return cost_for_tag({unit, unit, shape().size()}, tag);
    }

    std::string identity() const override {
        std::string id = "analytic:" + shape().to_string() + ":k" + std::to_string(prior_.components.size());
        for (const auto& c : prior_.components) {
            id += ":" + std::to_string(c.weight) + "/" + std::to_string(c.variance) + "/" +
                  std::to_string(l2_norm(c.mean));
        }
        return id + ":cut" + std::to_string(cutoff_);
    }

    Grid predict(const Grid& x_t, int t, CacheTag tag, CacheState& cache) const override {
        if (cache.blocks.size() != 1) throw std::invalid_argument("analytic cache state must have one slot");
        BlockCache& slot = cache.blocks.front();
        detail::check_reuse(slot, tag, t, 0);
        if (tag == CacheTag::Both) return add(low(slot), high(slot));
        Grid eps = analytic_eps(x_t, t, prior_, schedule_);

        BandPair bands = split_bands(eps, cutoff_);
        if (!reuses_attn(tag)) {
            slot.attn_delta = bands.low.storage();
            slot.attn_valid = true;
            slot.attn_step = t;
        }
        if (!reuses_mlp(tag)) {
            slot.mlp_delta = bands.high.storage();
            slot.mlp_valid = true;
            slot.mlp_step = t;
        }
        if (tag == CacheTag::None) return eps;
        return add(low(slot), high(slot));
    }

private:
    Grid low(const BlockCache& slot) const { return Grid(shape(), slot.attn_delta); }
    Grid high(const BlockCache& slot) const { return Grid(shape(), slot.mlp_delta); }

    GaussianMixturePrior prior_;
    NoiseSchedule schedule_;
    double cutoff_;
};

}  // namespace febcache
