// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace febcache {

using Complex = std::complex<double>;

/// Spatial extent of a field: height x width x channels, row-major with
/// channels innermost.
struct Shape {
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t channels = 1;

    constexpr std::size_t size() const noexcept { return height * width * channels; }
    constexpr bool operator==(const Shape&) const = default;

    std::string to_string() const {
        return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
    }
};

inline constexpr bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

template <class T>
class BasicGrid {
public:
    using value_type = T;

    BasicGrid() = default;

    explicit BasicGrid(Shape shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {
        if (shape.size() == 0) {
            throw std::invalid_argument("grid shape " + shape.to_string() + " has a zero dimension");
        }
    }

    BasicGrid(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.size()) {
            throw std::invalid_argument("grid data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_.to_string());
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::size_t index(std::size_t y, std::size_t x, std::size_t c) const noexcept {
        return (y * shape_.width + x) * shape_.channels + c;
    }
    T& at(std::size_t y, std::size_t x, std::size_t c = 0) noexcept { return data_[index(y, x, c)]; }
    const T& at(std::size_t y, std::size_t x, std::size_t c = 0) const noexcept {
        return data_[index(y, x, c)];
    }

    bool operator==(const BasicGrid&) const = default;

private:
    Shape shape_{0, 0, 0};
    std::vector<T> data_;
};

using Grid = BasicGrid<double>;
using ComplexGrid = BasicGrid<Complex>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (!(a == b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.to_string() + " vs " +
                                    b.to_string());
    }
}

// Elementwise helpers. All return fresh grids; inputs are never aliased.

/// alpha * a + beta * b
inline Grid lincomb(double alpha, const Grid& a, double beta, const Grid& b) {
    require_same_shape(a.shape(), b.shape(), "lincomb");
    Grid out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i] + beta * b[i];
    return out;
}

inline Grid scaled(const Grid& a, double alpha) {
    Grid out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = alpha * a[i];
    return out;
}

inline Grid add(const Grid& a, const Grid& b) { return lincomb(1.0, a, 1.0, b); }
inline Grid sub(const Grid& a, const Grid& b) { return lincomb(1.0, a, -1.0, b); }

inline double squared_norm(std::span<const double> v) noexcept {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

inline double l2_norm(const Grid& g) noexcept { return std::sqrt(squared_norm(g.values())); }

inline double l1_norm(const Grid& g) noexcept {
    double s = 0.0;
    for (double x : g.values()) s += std::abs(x);
    return s;
}

inline bool all_finite(const Grid& g) noexcept {
    return std::all_of(g.values().begin(), g.values().end(), [](double v) { return std::isfinite(v); });
}

/// Population mean and variance in one pass (Welford).
struct Moments {
    double mean = 0.0;
    double variance = 0.0;
    std::size_t count = 0;
};

class RunningMoments {
public:
    void push(double x) noexcept {
        ++n_;
        const double d = x - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d * (x - mean_);
    }
    void push(std::span<const double> xs) noexcept {
        for (double x : xs) push(x);
    }
    Moments result() const noexcept {
        return {mean_, n_ > 0 ? m2_ / static_cast<double>(n_) : 0.0, n_};
    }

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

inline Moments moments(std::span<const double> xs) noexcept {
    RunningMoments rm;
    rm.push(xs);
    return rm.result();
}

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kDigits[h & 0xF];
    return out;
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

/// SplitMix64 finalizer (Stafford variant 13).
inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Counter-based splittable generator. The n-th 64-bit output of stream
/// (seed, stream) is mix64(key + (n + 1) * gamma) where key is derived from
/// seed and stream by two mixing rounds, so any (seed, stream, n) can be
/// reproduced without replaying the sequence. Normal deviates come from
/// Box-Muller over pairs of 53-bit uniforms.
///
/// Instances are single-owner; use split() or a distinct stream id per
/// worker.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
        : seed_(seed), stream_(stream),
          key_(detail::mix64(detail::mix64(seed + detail::kGoldenGamma) ^
                             (stream * 0xD1B54A32D192ED03ULL + 0x8BB84B93962EACC9ULL))) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    std::uint64_t position() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return detail::mix64(key_ + counter_ * detail::kGoldenGamma);
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Independent child generator; the parent is not advanced.
    SeededRng split(std::uint64_t child) const noexcept {
        return SeededRng(key_ ^ detail::mix64(child + 0x632BE59BD9B4E019ULL), stream_);
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Grid gaussian_sample(SeededRng& rng, Shape shape) {
    if (shape.size() == 0) {
        throw std::invalid_argument("gaussian_sample: zero-sized shape " + shape.to_string());
    }
    Grid g(shape);
    for (double& v : g.values()) v = rng.normal();
    return g;
}

// ---------------------------------------------------------------------------
// FFT
// ---------------------------------------------------------------------------

/// In-place iterative radix-2 transform of a strided sequence. Forward uses
/// exp(-2*pi*i*k*n/N); no normalization is applied here.
inline void fft1d_strided(Complex* data, std::size_t n, std::size_t stride, bool inverse) {
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(data[i * stride], data[j * stride]);
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
        const std::size_t half = len / 2;
        for (std::size_t start = 0; start < n; start += len) {
            for (std::size_t k = 0; k < half; ++k) {
                // Twiddles evaluated directly rather than by recurrence to keep
                // round-off at the 1e-15 level for the sizes used here.
                const Complex w = std::polar(1.0, angle * static_cast<double>(k));
                Complex& a = data[(start + k) * stride];
                Complex& b = data[(start + k + half) * stride];
                const Complex t = w * b;
                b = a - t;
                a += t;
            }
        }
    }
}

/// 2-D transform applied independently to each channel. The forward
/// transform is unnormalized; the inverse divides by H*W.
inline ComplexGrid fft2d(const ComplexGrid& field, bool inverse = false) {
    const Shape s = field.shape();
    if (!is_power_of_two(s.height) || !is_power_of_two(s.width)) {
        throw std::invalid_argument("fft2d: dimensions must be powers of two, got " + s.to_string());
    }
    ComplexGrid out = field;
    Complex* base = out.values().data();
    const std::size_t row_stride = s.width * s.channels;
    for (std::size_t c = 0; c < s.channels; ++c) {
        for (std::size_t y = 0; y < s.height; ++y) {
            fft1d_strided(base + y * row_stride + c, s.width, s.channels, inverse);
        }
        for (std::size_t x = 0; x < s.width; ++x) {
            fft1d_strided(base + x * s.channels + c, s.height, row_stride, inverse);
        }
    }
    if (inverse) {
        const double norm = 1.0 / static_cast<double>(s.height * s.width);
        for (Complex& v : out.values()) v *= norm;
    }
    return out;
}

inline ComplexGrid to_complex(const Grid& g) {
    ComplexGrid out(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = Complex(g[i], 0.0);
    return out;
}

inline Grid real_part(const ComplexGrid& g) {
    Grid out(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i].real();
    return out;
}

/// Radial frequency of spectrum bin (ky, kx) in units of Nyquist, using the
/// centered (signed) frequency along each axis. A unit-length axis has only
/// DC.
inline double radial_frequency(std::size_t ky, std::size_t kx, std::size_t height, std::size_t width) noexcept {
    auto axis = [](std::size_t k, std::size_t n) {
        if (n < 2) return 0.0;
        const std::size_t folded = std::min(k, n - k);
        return static_cast<double>(folded) / static_cast<double>(n / 2);
    };
    const double fy = axis(ky, height);
    const double fx = axis(kx, width);
    return std::sqrt(fy * fy + fx * fx);
}

inline void check_cutoff(double cutoff) {
    if (!(cutoff > 0.0 && cutoff < 1.0)) throw std::invalid_argument("band cutoff must lie in (0, 1)");
}

/// True for spectrum bins with radial frequency <= cutoff * Nyquist.
inline std::vector<bool> low_band_mask(std::size_t height, std::size_t width, double cutoff) {
    check_cutoff(cutoff);
    std::vector<bool> mask(height * width);
    for (std::size_t ky = 0; ky < height; ++ky) {
        for (std::size_t kx = 0; kx < width; ++kx) {
            mask[ky * width + kx] = radial_frequency(ky, kx, height, width) <= cutoff;
        }
    }
    return mask;
}

struct BandPair {
    Grid low;
    Grid high;
};

/// Splits a field into low- and high-frequency parts with low + high == field
/// up to round-off.
inline BandPair split_bands(const Grid& field, double cutoff) {
    const Shape s = field.shape();
    const std::vector<bool> mask = low_band_mask(s.height, s.width, cutoff);
    const ComplexGrid spectrum = fft2d(to_complex(field));
    ComplexGrid low_spec(s);
    ComplexGrid high_spec(s);
    for (std::size_t ky = 0; ky < s.height; ++ky) {
        for (std::size_t kx = 0; kx < s.width; ++kx) {
            const bool is_low = mask[ky * s.width + kx];
            for (std::size_t c = 0; c < s.channels; ++c) {
                const std::size_t i = spectrum.index(ky, kx, c);
                (is_low ? low_spec : high_spec)[i] = spectrum[i];
            }
        }
    }
    return {real_part(fft2d(low_spec, true)), real_part(fft2d(high_spec, true))};
}

// ---------------------------------------------------------------------------

inline std::vector<double> softmax(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    const double peak = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - peak);
        total += out[i];
    }
    for (double& x : out) x /= total;
    return out;
}

/// Stable log(sum(exp(v))).
inline double log_sum_exp(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("log_sum_exp: empty input");
    const double peak = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(peak)) return peak;
    double total = 0.0;
    for (double x : v) total += std::exp(x - peak);
    return peak + std::log(total);
}

}  // namespace febcache
