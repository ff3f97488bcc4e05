// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "febcache/cache.hpp"
#include "febcache/errors.hpp"
#include "febcache/numerics.hpp"

namespace febcache {

/// Multiply-accumulate counts for one prediction.
struct ComputeCost {
    std::uint64_t attn = 0;
    std::uint64_t mlp = 0;
    std::uint64_t overhead = 0;

    constexpr std::uint64_t total() const noexcept { return attn + mlp + overhead; }
    constexpr bool operator==(const ComputeCost&) const = default;

    ComputeCost& operator+=(const ComputeCost& o) noexcept {
        attn += o.attn;
        mlp += o.mlp;
        overhead += o.overhead;
        return *this;
    }
};

/// Zeroes the components a tag reuses.
inline constexpr ComputeCost cost_for_tag(ComputeCost fresh, CacheTag tag) noexcept {
    if (reuses_attn(tag)) fresh.attn = 0;
    if (reuses_mlp(tag)) fresh.mlp = 0;
    return fresh;
}

/// Cached sublayer outputs for one block. The deltas are the additive terms
/// a sublayer contributes to the residual stream.
struct BlockCache {
    std::vector<double> attn_delta;
    std::vector<double> mlp_delta;
    bool attn_valid = false;
    bool mlp_valid = false;
    int attn_step = -1;
    int mlp_step = -1;
};

/// Private per-trajectory cache. Never shared between concurrent runs.
struct CacheState {
    std::vector<BlockCache> blocks;

    explicit CacheState(std::size_t n_blocks = 0) : blocks(n_blocks) {}

    void clear() {
        for (BlockCache& b : blocks) b = BlockCache{};
    }
};

/// Noise predictor with separately cacheable attention and MLP paths.
///
/// With tag None the output does not depend on cache contents. With any tag,
/// identical (x_t, t, cache) gives bit-identical output. Reusing a slot that
/// was never written throws CacheMissError.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;

    virtual Shape shape() const = 0;
    virtual Grid predict(const Grid& x_t, int t, CacheTag tag, CacheState& cache) const = 0;
    virtual ComputeCost cost(CacheTag tag) const = 0;
    virtual CacheState make_cache() const = 0;
    /// Stable description used in config hashes and trace pairing.
    virtual std::string identity() const = 0;
};

namespace detail {

inline void check_reuse(const BlockCache& block, CacheTag tag, int t, std::size_t block_index) {
    if (reuses_attn(tag) && !block.attn_valid) {
        throw CacheMissError("attention cache of block " + std::to_string(block_index) + " is empty", t);
    }
    if (reuses_mlp(tag) && !block.mlp_valid) {
        throw CacheMissError("MLP cache of block " + std::to_string(block_index) + " is empty", t);
    }
}

}  // namespace detail

}  // namespace febcache
