#pragma once

// The full network: patchify encoder with positional embedding and FiLM
// temporal modulation, a stack of axial transformer blocks split into n
// contiguous groups, and per-order decoders producing a Taylor jet: the
// estimated temporal derivatives of the field plus a learned radius of
// convergence that doubles as the adaptive step size.
//
// n = 0 selects the fixed-step variant: a single derivative head, no
// radius head, always stepping by exactly one time unit.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tante/field.hpp"
#include "tante/layers.hpp"
#include "tante/tensor.hpp"

namespace tante {

struct ModelConfig {
    std::int64_t n = 1;  // max Taylor order; 0 = fixed-step variant
    std::int64_t patch = 8;
    std::int64_t embed_dim = 256;
    std::int64_t mlp_dim = 256;
    std::int64_t heads = 8;
    std::int64_t total_blocks = 9;
    double r_min = 1.0;
    double r_max = 0.0;  // <= 0 resolves to 2*T
    double reg_eps = 0.5;
    double reg_m = 2.0;
    std::int64_t D = 1, H = 64, W = 64, T = 4;

    bool adaptive() const { return n >= 1; }
    std::int64_t order() const { return n >= 1 ? n : 1; }  // derivative heads

    void validate() {
        check(n >= 0, "config: n must be >= 0");
        check(T >= 1 && H >= 1 && W >= 1 && D >= 1, "config: bad data dims");
        check(patch >= 1 && H % patch == 0 && W % patch == 0,
              "config: H and W must be divisible by patch");
        check(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0,
              "config: heads must divide embed_dim");
        check(total_blocks >= order(), "config: need at least n blocks for n groups");
        if (r_max <= 0.0) {
            r_max = 2.0 * static_cast<double>(T);
        }
        check(r_min <= r_max, "config: r_min must not exceed r_max");
        check(reg_eps > 0.0, "config: regularizer eps must be positive");
        check(reg_m >= 1.0, "config: regularizer exponent must be >= 1");
    }
};

/// Taylor jet at the most recent input frame: the frame itself, n estimated
/// temporal derivatives, and (for adaptive models) the learned radius of
/// convergence. Evaluating the jet at any offset needs no further network
/// calls.
struct TaylorJet {
    Tensor base;                 // (H,W,D), exact copy of the newest input frame
    std::vector<Tensor> derivs;  // k-th entry estimates the (k+1)-th derivative
    Tensor radius;               // scalar; undefined for the fixed-step variant

    bool has_radius() const { return radius.defined(); }
    double radius_value() const {
        check(has_radius(), "jet: fixed-step jet has no radius");
        return radius.item();
    }
};

/// Polynomial evaluation of the jet: u(0) + sum_k d_k * t^k / k!.
/// Differentiable in the derivative tensors; exact in t.
inline Tensor taylor_eval(const TaylorJet& jet, double t) {
    Tensor out = jet.base;
    double factorial = 1.0;
    double tpow = 1.0;
    for (std::size_t k = 0; k < jet.derivs.size(); ++k) {
        factorial *= static_cast<double>(k + 1);
        tpow *= t;
        out = add(out, mul_scalar(jet.derivs[k], tpow / factorial));
    }
    return out;
}

/// Radius regularizer: (1 + eps - r)^m below the knee 1 + eps, zero above.
/// Continuous at the knee; pushes small radii upward during training.
inline Tensor regularization_loss(const Tensor& radius, double eps, double m) {
    return pow_scalar(relu(sub(Tensor::scalar(1.0 + eps), radius)), m);
}

inline double regularization_loss(double radius, double eps, double m) {
    const double hinge = 1.0 + eps - radius;
    return hinge > 0.0 ? std::pow(hinge, m) : 0.0;
}

/// Mean over all token-wise raw radius outputs mapped through a scaled
/// sigmoid into (r_min, r_max).
inline Tensor decode_radius_from_raw(const Tensor& raw, double r_min, double r_max) {
    return mean(add_scalar(mul_scalar(sigmoid(raw), r_max - r_min), r_min));
}

/// Contiguous group sizes for the processor: total blocks split into
/// `groups` parts differing by at most one, earlier groups taking the extra.
inline std::vector<std::int64_t> group_sizes(std::int64_t total, std::int64_t groups) {
    check(groups >= 1 && total >= groups, "group_sizes: need total >= groups >= 1");
    std::vector<std::int64_t> sizes(static_cast<std::size_t>(groups), total / groups);
    for (std::int64_t i = 0; i < total % groups; ++i) {
        sizes[static_cast<std::size_t>(i)]++;
    }
    return sizes;
}

struct TanteModel {
    ModelConfig cfg;
    PatchEmbed embed;
    SpatialPE pos;
    FiLMLayer film;
    std::vector<AxialBlock> blocks;
    std::vector<Mlp> radius_mlps;       // one per order; empty when n = 0
    std::vector<Unpatchify> deriv_heads;  // one per order (>= 1)

    TanteModel() = default;
    TanteModel(ModelConfig c, std::uint64_t seed) : cfg(c) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        const std::int64_t hp = cfg.H / cfg.patch, wp = cfg.W / cfg.patch;
        embed = PatchEmbed(cfg.patch, cfg.D, cfg.embed_dim, rng);
        pos = SpatialPE(hp, wp, cfg.embed_dim, rng);
        film = FiLMLayer(cfg.embed_dim, rng);
        blocks.reserve(static_cast<std::size_t>(cfg.total_blocks));
        for (std::int64_t i = 0; i < cfg.total_blocks; ++i) {
            blocks.emplace_back(axis_for_block(i), cfg.embed_dim, cfg.mlp_dim, cfg.heads, rng);
        }
        for (std::int64_t k = 0; k < cfg.order(); ++k) {
            if (cfg.adaptive()) {
                // Final layer zeroed: raw output 0, radius starts mid-range.
                radius_mlps.emplace_back(cfg.embed_dim, cfg.embed_dim, 1, rng,
                                         /*zero_out=*/true);
            }
            deriv_heads.emplace_back(cfg.patch, cfg.embed_dim, cfg.D, rng,
                                     /*zero_final=*/true);
        }
    }

    NamedParams params() const {
        NamedParams out;
        embed.collect("embed", out);
        pos.collect("pos", out);
        film.collect("film", out);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].collect("block" + std::to_string(i), out);
        }
        for (std::size_t k = 0; k < radius_mlps.size(); ++k) {
            radius_mlps[k].collect("radius" + std::to_string(k), out);
        }
        for (std::size_t k = 0; k < deriv_heads.size(); ++k) {
            deriv_heads[k].collect("deriv" + std::to_string(k), out);
        }
        return out;
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params()) {
            n += t.size();
        }
        return n;
    }

    TaylorJet forward(const FieldSequence& window) const {
        window.validate();
        check(window.T() == cfg.T && window.H() == cfg.H && window.W() == cfg.W &&
                  window.D() == cfg.D,
              "forward: window shape " + shape_str(window.frames.shape()) +
                  " does not match model config");

        Tensor x = film.apply(pos.apply(embed.apply(window.frames)), window.timestamps);

        const auto sizes = group_sizes(cfg.total_blocks, cfg.order());
        std::vector<Tensor> z;  // (1,H',W',C) per group, newest-timestamp tokens
        z.reserve(sizes.size());
        std::size_t next = 0;
        for (std::int64_t gs : sizes) {
            for (std::int64_t i = 0; i < gs; ++i) {
                x = blocks[next++].apply(x);
            }
            z.push_back(slice(x, 0, cfg.T - 1, 1));
        }

        TaylorJet jet;
        jet.base = window.newest().detach();
        const std::int64_t hp = cfg.H / cfg.patch, wp = cfg.W / cfg.patch;
        for (std::size_t k = 0; k < z.size(); ++k) {
            Tensor field = deriv_heads[k].apply(z[k]);  // (1,H,W,D)
            jet.derivs.push_back(reshape(field, {cfg.H, cfg.W, cfg.D}));
        }
        if (cfg.adaptive()) {
            std::vector<Tensor> raws;
            raws.reserve(z.size());
            for (std::size_t k = 0; k < z.size(); ++k) {
                Tensor tokens = reshape(z[k], {hp * wp, cfg.embed_dim});
                raws.push_back(radius_mlps[k].apply(tokens));  // (H'W',1)
            }
            jet.radius = decode_radius_from_raw(concat(raws, 0), cfg.r_min, cfg.r_max);
        }
        return jet;
    }
};

}  // namespace tante
