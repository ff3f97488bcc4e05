// Copyright 2026 The febcache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "febcache/model.hpp"
#include "febcache/numerics.hpp"
#include "febcache/tensor_io.hpp"

namespace febcache {

struct ToyDiTConfig {
    Shape grid{8, 8, 4};
    std::size_t patch = 2;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_blocks = 2;
    std::uint64_t seed = 0;

    std::size_t tokens() const noexcept { return (grid.height / patch) * (grid.width / patch); }
    std::size_t patch_dim() const noexcept { return patch * patch * grid.channels; }
    std::size_t mlp_hidden() const noexcept { return 4 * d_model; }

    void validate() const {
        if (grid.size() == 0 || patch == 0 || d_model == 0 || n_heads == 0 || n_blocks == 0) {
            throw std::invalid_argument("toy DiT config has a zero dimension");
        }
        if (grid.height % patch != 0 || grid.width % patch != 0) {
            throw std::invalid_argument("grid " + grid.to_string() + " is not divisible by patch " +
                                        std::to_string(patch));
        }
        if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
        if (d_model % 2 != 0) throw std::invalid_argument("d_model must be even for the timestep embedding");
    }

    std::string identity() const {
        return "toy-dit:" + grid.to_string() + ":p" + std::to_string(patch) + ":d" + std::to_string(d_model) + ":h" +
               std::to_string(n_heads) + ":b" + std::to_string(n_blocks) + ":s" + std::to_string(seed);
    }
};

/// Closed-form MAC counts for one toy DiT forward pass.
///
///   attention per block: 4*L*d^2 (Q, K, V, output projections) + 2*L^2*d
///                        (scores and weighted values, summed over heads)
///   MLP per block:       2 * L*d*(4d)
///   overhead:            L*P*d (patch embed) + 2*d^2 (timestep MLP)
///                        + L*d*P (output projection)
///
/// with L tokens, width d and P = patch^2 * channels.
inline ComputeCost compute_cost(const ToyDiTConfig& cfg, CacheTag tag) {
    const std::uint64_t L = cfg.tokens();
    const std::uint64_t d = cfg.d_model;
    const std::uint64_t P = cfg.patch_dim();
    const std::uint64_t blocks = cfg.n_blocks;
    ComputeCost fresh;
    fresh.attn = blocks * (4 * L * d * d + 2 * L * L * d);
    fresh.mlp = blocks * (2 * L * d * (4 * d));
    fresh.overhead = L * P * d + 2 * d * d + L * d * P;
    return cost_for_tag(fresh, tag);
}

/// Desk-scale diffusion transformer: patch embedding plus learned position
/// and timestep embeddings, pre-norm blocks h += Attn(LN(h)); h += MLP(LN(h)),
/// final norm and linear projection back to the noise shape. Each block's two
/// residual deltas can be reused from the cache independently.
class ToyDiT final : public NoisePredictor {
public:
    /// Seeded Gaussian weights scaled by 1/sqrt(fan_in); biases zero.
    explicit ToyDiT(ToyDiTConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        allocate();
        SeededRng rng(cfg_.seed, 0x7e1917ULL);
        for (Linear* lin : linears()) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(lin->in));
            for (double& w : lin->w) w = rng.normal() * scale;
        }
        const double pos_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
        for (double& p : pos_embed_) p = rng.normal() * pos_scale;
    }

    static ToyDiT zeros(ToyDiTConfig cfg) {
        ToyDiT model(cfg);
        for (Linear* lin : model.linears()) {
            std::fill(lin->w.begin(), lin->w.end(), 0.0);
            std::fill(lin->b.begin(), lin->b.end(), 0.0);
        }
        std::fill(model.pos_embed_.begin(), model.pos_embed_.end(), 0.0);
        return model;
    }

    const ToyDiTConfig& config() const noexcept { return cfg_; }

    Shape shape() const override { return cfg_.grid; }
    CacheState make_cache() const override { return CacheState(cfg_.n_blocks); }
    ComputeCost cost(CacheTag tag) const override { return compute_cost(cfg_, tag); }
    std::string identity() const override { return cfg_.identity(); }

    Grid predict(const Grid& x_t, int t, CacheTag tag, CacheState& cache) const override {
        std::uint64_t macs = 0;
        return forward(x_t, t, tag, cache, macs);
    }

    /// Same as predict, additionally counting every multiply-accumulate the
    /// pass performs into `macs`.
    Grid forward(const Grid& x_t, int t, CacheTag tag, CacheState& cache, std::uint64_t& macs) const {
        require_same_shape(x_t.shape(), cfg_.grid, "toy DiT input");
        if (cache.blocks.size() != cfg_.n_blocks) throw std::invalid_argument("cache state has wrong block count");
        const std::size_t L = cfg_.tokens();
        const std::size_t d = cfg_.d_model;

        std::vector<double> h = apply(patch_embed_, patchify(x_t), L, macs);
        const std::vector<double> temb = timestep_embedding(t, macs);
        for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t k = 0; k < d; ++k) h[i * d + k] += pos_embed_[i * d + k] + temb[k];
        }

        for (std::size_t j = 0; j < blocks_.size(); ++j) {
            BlockCache& slot = cache.blocks[j];
            detail::check_reuse(slot, tag, t, j);
            if (!reuses_attn(tag)) {
                slot.attn_delta = attention(blocks_[j], layer_norm(h, L), macs);
                slot.attn_valid = true;
                slot.attn_step = t;
            }
            add_into(h, slot.attn_delta);
            if (!reuses_mlp(tag)) {
                slot.mlp_delta = mlp(blocks_[j], layer_norm(h, L), macs);
                slot.mlp_valid = true;
                slot.mlp_step = t;
            }
            add_into(h, slot.mlp_delta);
        }
        return unpatchify(apply(final_proj_, layer_norm(h, L), L, macs));
    }

    /// Every parameter as a named tensor, in a fixed order.
    TensorBundle tensors() const {
        TensorBundle bundle;
        auto push_linear = [&](const std::string& name, const Linear& lin) {
            bundle.tensors.push_back({name + ".weight", {lin.in, lin.out}, lin.w});
            bundle.tensors.push_back({name + ".bias", {lin.out}, lin.b});
        };
        push_linear("patch_embed", patch_embed_);
        bundle.tensors.push_back({"pos_embed", {cfg_.tokens(), cfg_.d_model}, pos_embed_});
        push_linear("time_mlp.0", time_in_);
        push_linear("time_mlp.1", time_out_);
        for (std::size_t j = 0; j < blocks_.size(); ++j) {
            const std::string prefix = "blocks." + std::to_string(j) + ".";
            push_linear(prefix + "attn.q", blocks_[j].q);
            push_linear(prefix + "attn.k", blocks_[j].k);
            push_linear(prefix + "attn.v", blocks_[j].v);
            push_linear(prefix + "attn.o", blocks_[j].o);
            push_linear(prefix + "mlp.fc1", blocks_[j].fc1);
            push_linear(prefix + "mlp.fc2", blocks_[j].fc2);
        }
        push_linear("final_proj", final_proj_);
        bundle.meta = {{"model", cfg_.identity()}};
        return bundle;
    }

    /// Replaces all parameters. Names and shapes must match tensors() exactly.
    void load_tensors(const TensorBundle& bundle) {
        const TensorBundle layout = tensors();
        if (bundle.tensors.size() != layout.tensors.size()) {
            throw std::invalid_argument("weight bundle has " + std::to_string(bundle.tensors.size()) +
                                        " tensors, model expects " + std::to_string(layout.tensors.size()));
        }
        for (const NamedTensor& want : layout.tensors) {
            const NamedTensor* got = bundle.find(want.name);
            if (got == nullptr) throw std::invalid_argument("weight bundle is missing " + want.name);
            if (got->shape != want.shape) throw std::invalid_argument("weight " + want.name + " has wrong shape");
        }
        auto take = [&](std::vector<double>& dst, const std::string& name) { dst = bundle.find(name)->data; };
        auto take_linear = [&](const std::string& name, Linear& lin) {
            take(lin.w, name + ".weight");
            take(lin.b, name + ".bias");
        };
        take_linear("patch_embed", patch_embed_);
        take(pos_embed_, "pos_embed");
        take_linear("time_mlp.0", time_in_);
        take_linear("time_mlp.1", time_out_);
        for (std::size_t j = 0; j < blocks_.size(); ++j) {
            const std::string prefix = "blocks." + std::to_string(j) + ".";
            take_linear(prefix + "attn.q", blocks_[j].q);
            take_linear(prefix + "attn.k", blocks_[j].k);
            take_linear(prefix + "attn.v", blocks_[j].v);
            take_linear(prefix + "attn.o", blocks_[j].o);
            take_linear(prefix + "mlp.fc1", blocks_[j].fc1);
            take_linear(prefix + "mlp.fc2", blocks_[j].fc2);
        }
        take_linear("final_proj", final_proj_);
    }

private:
    // Row-major weight of shape (in, out): y = x W + b.
    struct Linear {
        std::size_t in = 0;
        std::size_t out = 0;
        std::vector<double> w;
        std::vector<double> b;

        Linear() = default;
        Linear(std::size_t i, std::size_t o) : in(i), out(o), w(i * o, 0.0), b(o, 0.0) {}
    };

    struct Block {
        Linear q, k, v, o, fc1, fc2;
    };

    void allocate() {
        const std::size_t d = cfg_.d_model;
        patch_embed_ = Linear(cfg_.patch_dim(), d);
        pos_embed_.assign(cfg_.tokens() * d, 0.0);
        time_in_ = Linear(d, d);
        time_out_ = Linear(d, d);
        blocks_.resize(cfg_.n_blocks);
        for (Block& b : blocks_) {
            b.q = Linear(d, d);
            b.k = Linear(d, d);
            b.v = Linear(d, d);
            b.o = Linear(d, d);
            b.fc1 = Linear(d, cfg_.mlp_hidden());
            b.fc2 = Linear(cfg_.mlp_hidden(), d);
        }
        final_proj_ = Linear(d, cfg_.patch_dim());
    }

    std::vector<Linear*> linears() {
        std::vector<Linear*> out{&patch_embed_, &time_in_, &time_out_};
        for (Block& b : blocks_) {
            for (Linear* lin : {&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2}) out.push_back(lin);
        }
        out.push_back(&final_proj_);
        return out;
    }

    static std::vector<double> apply(const Linear& lin, std::span<const double> x, std::size_t rows,
                                     std::uint64_t& macs) {
        std::vector<double> y(rows * lin.out);
        for (std::size_t r = 0; r < rows; ++r) {
            double* yr = y.data() + r * lin.out;
            for (std::size_t o = 0; o < lin.out; ++o) yr[o] = lin.b[o];
            for (std::size_t i = 0; i < lin.in; ++i) {
                const double xi = x[r * lin.in + i];
                const double* wi = lin.w.data() + i * lin.out;
                for (std::size_t o = 0; o < lin.out; ++o) yr[o] += xi * wi[o];
            }
        }
        macs += rows * lin.in * lin.out;
        return y;
    }

    static void add_into(std::vector<double>& h, const std::vector<double>& delta) {
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += delta[i];
    }

    std::vector<double> layer_norm(const std::vector<double>& h, std::size_t rows) const {
        constexpr double kEps = 1e-6;
        const std::size_t d = cfg_.d_model;
        std::vector<double> out(h.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const Moments m = moments(std::span(h).subspan(r * d, d));
            const double inv = 1.0 / std::sqrt(m.variance + kEps);
            for (std::size_t k = 0; k < d; ++k) out[r * d + k] = (h[r * d + k] - m.mean) * inv;
        }
        return out;
    }

    std::vector<double> attention(const Block& blk, const std::vector<double>& x, std::uint64_t& macs) const {
        const std::size_t L = cfg_.tokens();
        const std::size_t d = cfg_.d_model;
        const std::size_t heads = cfg_.n_heads;
        const std::size_t dh = d / heads;
        const std::vector<double> q = apply(blk.q, x, L, macs);
        const std::vector<double> k = apply(blk.k, x, L, macs);
        const std::vector<double> v = apply(blk.v, x, L, macs);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        std::vector<double> mixed(L * d, 0.0);
        std::vector<double> scores(L);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t off = hd * dh;
            for (std::size_t i = 0; i < L; ++i) {
                for (std::size_t j = 0; j < L; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += q[i * d + off + c] * k[j * d + off + c];
                    scores[j] = s * inv_sqrt;
                }
                const std::vector<double> w = softmax(scores);
                for (std::size_t j = 0; j < L; ++j) {
                    for (std::size_t c = 0; c < dh; ++c) mixed[i * d + off + c] += w[j] * v[j * d + off + c];
                }
            }
        }
        macs += 2 * L * L * d;
        return apply(blk.o, mixed, L, macs);
    }

    static double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
    static double silu(double x) noexcept { return x / (1.0 + std::exp(-x)); }

    std::vector<double> mlp(const Block& blk, const std::vector<double>& x, std::uint64_t& macs) const {
        const std::size_t L = cfg_.tokens();
        std::vector<double> hidden = apply(blk.fc1, x, L, macs);
        for (double& v : hidden) v = gelu(v);
        return apply(blk.fc2, hidden, L, macs);
    }

    /// Sinusoidal features of t followed by a two-layer SiLU MLP.
    std::vector<double> timestep_embedding(int t, std::uint64_t& macs) const {
        const std::size_t d = cfg_.d_model;
        const std::size_t half = d / 2;
        std::vector<double> feat(d);
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            feat[i] = std::cos(static_cast<double>(t) * freq);
            feat[half + i] = std::sin(static_cast<double>(t) * freq);
        }
        std::vector<double> hidden = apply(time_in_, feat, 1, macs);
        for (double& v : hidden) v = silu(v);
        return apply(time_out_, hidden, 1, macs);
    }

    std::vector<double> patchify(const Grid& x) const {
        const std::size_t p = cfg_.patch;
        const std::size_t C = cfg_.grid.channels;
        const std::size_t gw = cfg_.grid.width / p;
        std::vector<double> out(cfg_.tokens() * cfg_.patch_dim());
        for (std::size_t y = 0; y < cfg_.grid.height; ++y) {
            for (std::size_t xx = 0; xx < cfg_.grid.width; ++xx) {
                const std::size_t token = (y / p) * gw + xx / p;
                const std::size_t inner = ((y % p) * p + xx % p) * C;
                for (std::size_t c = 0; c < C; ++c) out[token * cfg_.patch_dim() + inner + c] = x.at(y, xx, c);
            }
        }
        return out;
    }

    Grid unpatchify(const std::vector<double>& tokens) const {
        const std::size_t p = cfg_.patch;
        const std::size_t C = cfg_.grid.channels;
        const std::size_t gw = cfg_.grid.width / p;
        Grid out(cfg_.grid);
        for (std::size_t y = 0; y < cfg_.grid.height; ++y) {
            for (std::size_t xx = 0; xx < cfg_.grid.width; ++xx) {
                const std::size_t token = (y / p) * gw + xx / p;
                const std::size_t inner = ((y % p) * p + xx % p) * C;
                for (std::size_t c = 0; c < C; ++c) out.at(y, xx, c) = tokens[token * cfg_.patch_dim() + inner + c];
            }
        }
        return out;
    }

    ToyDiTConfig cfg_;
    Linear patch_embed_;
    std::vector<double> pos_embed_;
    Linear time_in_;
    Linear time_out_;
    std::vector<Block> blocks_;
    Linear final_proj_;
};

}  // namespace febcache
