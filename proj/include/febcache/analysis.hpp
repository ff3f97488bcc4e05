// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "febcache/errors.hpp"
#include "febcache/numerics.hpp"
#include "febcache/sampler.hpp"
#include "febcache/schedule.hpp"

namespace febcache {

inline constexpr double kDefaultBandCutoff = 0.25;
inline constexpr double kDefaultSnrCap = 1e6;

struct BandEnergy {
    double low = 0.0;
    double high = 0.0;
};

/// L2 norms of the low- and high-frequency parts of a field, computed from
/// the spectrum through Parseval so low^2 + high^2 == ||field||^2.
inline BandEnergy band_energy(const Grid& field, double cutoff = kDefaultBandCutoff) {
    const Shape s = field.shape();
    const std::vector<bool> mask = low_band_mask(s.height, s.width, cutoff);
    const ComplexGrid spectrum = fft2d(to_complex(field));
    double low = 0.0;
    double high = 0.0;
    for (std::size_t ky = 0; ky < s.height; ++ky) {
        for (std::size_t kx = 0; kx < s.width; ++kx) {
            const bool is_low = mask[ky * s.width + kx];
            for (std::size_t c = 0; c < s.channels; ++c) {
                const double p = std::norm(spectrum[spectrum.index(ky, kx, c)]);
                (is_low ? low : high) += p;
            }
        }
    }
    const double norm = 1.0 / static_cast<double>(s.height * s.width);
    return {std::sqrt(low * norm), std::sqrt(high * norm)};
}

struct BandPoint {
    int step = 0;
    BandEnergy energy;
};

/// Band energies of the intermediate states x_t at every snapshot step.
inline std::vector<BandPoint> band_curve(const Trace& trace, double cutoff = kDefaultBandCutoff) {
    std::vector<BandPoint> out;
    for (const TraceStep& st : trace.steps) {
        if (st.x_t) out.push_back({st.step, band_energy(*st.x_t, cutoff)});
    }
    if (out.empty()) throw std::invalid_argument("band_curve: trace has no snapshots");
    return out;
}

struct CurvePoint {
    int step = 0;
    double value = 0.0;
};

/// Signal-to-noise ratio implied by each step's prediction:
///   abar_t ||x0_hat||^2 / ((1 - abar_t) ||b eps_hat||^2)
/// Every step must carry a snapshot. Ratios above `cap`, or with a vanishing
/// denominator, are reported as `cap`.
inline std::vector<CurvePoint> snr_curve(const Trace& trace, const NoiseSchedule& s, double cap = kDefaultSnrCap) {
    std::vector<CurvePoint> out;
    out.reserve(trace.steps.size());
    for (const TraceStep& st : trace.steps) {
        if (!st.x_t || !st.eps_hat) {
            throw std::invalid_argument("snr_curve: step " + std::to_string(st.step) + " has no snapshot");
        }
        const double ab = s.alpha_bar(st.timestep);
        const Grid x0_hat = predict_x0(*st.x_t, st.timestep, *st.eps_hat, st.b, s);
        const double signal = ab * squared_norm(x0_hat.values());
        const double noise = (1.0 - ab) * st.b * st.b * squared_norm(st.eps_hat->values());
        double snr = cap;
        if (noise > std::numeric_limits<double>::min()) snr = std::min(cap, signal / noise);
        out.push_back({st.step, snr});
    }
    return out;
}

namespace detail {

inline void require_paired(const Trace& a, const Trace& b) {
    if (a.seed != b.seed) {
        throw IncompatibleInputError("paired comparison needs equal seeds, got " + std::to_string(a.seed) + " and " +
                                     std::to_string(b.seed));
    }
    if (a.pairing_key != b.pairing_key || !(a.shape == b.shape)) {
        throw IncompatibleInputError("paired comparison needs the same model, schedule and sampler");
    }
}

}  // namespace detail

struct FeatureError {
    Grid error_map;  // |x_a - x_b| elementwise
    double l1 = 0.0;
    double l2 = 0.0;
};

/// Elementwise difference of the x_t snapshots two paired traces hold at
/// sampler position `step`.
inline FeatureError paired_feature_error(const Trace& a, const Trace& b, int step) {
    detail::require_paired(a, b);
    const TraceStep* sa = a.find_step(step);
    const TraceStep* sb = b.find_step(step);
    if (sa == nullptr || sb == nullptr || !sa->x_t || !sb->x_t) {
        throw std::invalid_argument("paired_feature_error: no snapshot at step " + std::to_string(step));
    }
    FeatureError out{sub(*sa->x_t, *sb->x_t), 0.0, 0.0};
    for (double& v : out.error_map.values()) v = std::abs(v);
    out.l1 = l1_norm(out.error_map);
    out.l2 = l2_norm(out.error_map);
    return out;
}

struct SpeedupRow {
    std::uint64_t macs = 0;
    double seconds = 0.0;
    double speedup = 1.0;    // baseline seconds / trace seconds
    double mac_ratio = 1.0;  // trace MACs / baseline MACs
};

inline std::vector<SpeedupRow> speedup_report(std::span<const Trace> traces, const Trace& baseline) {
    const double base_macs = static_cast<double>(baseline.total_cost().total());
    std::vector<SpeedupRow> rows;
    rows.reserve(traces.size());
    for (const Trace& tr : traces) {
        if (tr.model != baseline.model || !(tr.shape == baseline.shape)) {
            throw IncompatibleInputError("speedup_report: trace model differs from the baseline model");
        }
        SpeedupRow r;
        r.macs = tr.total_cost().total();
        r.seconds = tr.wall_seconds;
        if (tr.wall_seconds > 0.0) r.speedup = baseline.wall_seconds / tr.wall_seconds;
        r.mac_ratio = base_macs > 0.0 ? static_cast<double>(r.macs) / base_macs : 1.0;
        rows.push_back(r);
    }
    return rows;
}

}  // namespace febcache
