// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

// Predictors with closed-form behaviour, shared by several suites.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "febcache/cache.hpp"
#include "febcache/model.hpp"
#include "febcache/schedule.hpp"

namespace febcache::testing {

/// eps_hat = c * x_t, whatever the tag. Keeps cache flags honest so reuse
/// before a write still fails.
class LinearPredictor final : public NoisePredictor {
public:
    LinearPredictor(Shape shape, double c) : shape_(shape), c_(c) {}
    Shape shape() const override { return shape_; }
    CacheState make_cache() const override { return CacheState(1); }
    ComputeCost cost(CacheTag tag) const override { return cost_for_tag({1, 1, 0}, tag); }
    std::string identity() const override { return "linear"; }
    Grid predict(const Grid& x_t, int t, CacheTag tag, CacheState& cache) const override {
        BlockCache& b = cache.blocks.at(0);
        detail::check_reuse(b, tag, t, 0);
        b.attn_valid = b.attn_valid || !reuses_attn(tag);
        b.mlp_valid = b.mlp_valid || !reuses_mlp(tag);
        return scaled(x_t, c_);
    }

private:
    Shape shape_;
    double c_;
};

// All predictions equal c * x, so the DDIM path is tag-independent:
//   x_{t-1} = g_t x_t,  g_t = sqrt(abar_{t-1}/abar_t) (1 - sqrt(1 - abar_t) b_t c) + sqrt(1 - abar_{t-1}) b_t c
// and E_ori(t) = c ||x_t||, E_cached(t) = b_t E_ori(t). Both wins iff
// (1 - b_t) E_ori(t) < a + b t / T.
inline std::vector<CacheTag> linear_oracle(const NoiseSchedule& s, double c, double norm_xT, ThresholdSchedule th) {
    const int T = s.steps();
    const ScalingSchedule sch{};
    std::vector<CacheTag> tags;
    double norm = norm_xT;
    for (int t = T; t >= 1; --t) {
        const double b = scaling_factor(static_cast<double>(t) / T, sch);
        if (t <= T - 2) {
            const double e = c * norm;
            tags.push_back((1.0 - b) * e < th.a + th.b * t / T ? CacheTag::Both : CacheTag::None);
        } else {
            tags.push_back(CacheTag::None);
        }
        const double ab = s.alpha_bar(t);
        const double abp = s.alpha_bar(t - 1);
        const double g = std::sqrt(abp / ab) * (1.0 - std::sqrt(1.0 - ab) * b * c) + std::sqrt(1.0 - abp) * b * c;
        norm *= std::abs(g);
    }
    return tags;
}

}  // namespace febcache::testing
