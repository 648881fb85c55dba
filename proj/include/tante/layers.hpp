#pragma once

// Network building blocks: linear/MLP, patchify and unpatchify CNNs,
// learnable spatial positional embedding, FiLM temporal modulation, and
// axial multi-head self-attention blocks.
//
// Initialization convention (ViT-style): weights truncated normal with
// std 0.02, biases zero. Output projections of attention and block MLPs
// are zeroed so every transformer block starts as the identity map.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tante/tensor.hpp"

namespace tante {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

constexpr double kInitStd = 0.02;

// ----------------------------------------------------------------- linear

struct Linear {
    Tensor w;  // (in, out)
    Tensor b;  // (out); may be undefined (bias-free layer)

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, std::mt19937_64& rng, bool zero_init = false,
           bool with_bias = true) {
        w = zero_init ? Tensor::zeros({in, out}, true)
                      : Tensor::trunc_normal({in, out}, rng, kInitStd, true);
        if (with_bias) {
            b = Tensor::zeros({out}, true);
        }
    }

    /// Applies to the trailing axis: (..., in) -> (..., out).
    Tensor apply(const Tensor& x) const {
        const std::int64_t in = w.extent(0);
        const std::int64_t out = w.extent(1);
        Shape result_shape = x.shape();
        check(result_shape.back() == in, "Linear: trailing extent mismatch");
        result_shape.back() = out;
        Tensor flat = matmul(reshape(x, {-1, in}), w);
        if (b.defined()) {
            flat = add(flat, b);
        }
        return reshape(flat, std::move(result_shape));
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".w", w);
        if (b.defined()) {
            out.emplace_back(prefix + ".b", b);
        }
    }
};

// Two-layer perceptron with GELU, the shape used by block MLPs, radius
// heads, and FiLM conditioning.
struct Mlp {
    Linear fc1;
    Linear fc2;

    Mlp() = default;
    Mlp(std::int64_t in, std::int64_t hidden, std::int64_t out, std::mt19937_64& rng,
        bool zero_out = false)
        : fc1(in, hidden, rng), fc2(hidden, out, rng, zero_out) {}

    Tensor apply(const Tensor& x) const { return fc2.apply(gelu(fc1.apply(x))); }

    void collect(const std::string& prefix, NamedParams& out) const {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    LayerNorm() = default;
    explicit LayerNorm(std::int64_t c) {
        gain = Tensor::ones({c}, true);
        bias = Tensor::zeros({c}, true);
    }

    Tensor apply(const Tensor& x) const { return layer_norm_lastdim(x, gain, bias); }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".gain", gain);
        out.emplace_back(prefix + ".bias", bias);
    }
};

// -------------------------------------------------------------- patchify

/// Three-stage frame tokenizer: two 3x3 stride-1 convolutions at width C/2
/// followed by a PxP stride-P projection to width C. Each frame is mapped
/// independently (time acts as the batch axis).
struct PatchEmbed {
    std::int64_t patch = 1;
    std::int64_t in_channels = 0;
    std::int64_t embed_dim = 0;
    bool hidden_stages = true;  // false: single linear PxP projection
    Tensor w1, b1, w2, b2, w3, b3;

    PatchEmbed() = default;
    PatchEmbed(std::int64_t p, std::int64_t d, std::int64_t c, std::mt19937_64& rng)
        : patch(p), in_channels(d), embed_dim(c) {
        const std::int64_t mid = c / 2 > 0 ? c / 2 : 1;
        w1 = Tensor::trunc_normal({3, 3, d, mid}, rng, kInitStd, true);
        b1 = Tensor::zeros({mid}, true);
        w2 = Tensor::trunc_normal({3, 3, mid, mid}, rng, kInitStd, true);
        b2 = Tensor::zeros({mid}, true);
        w3 = Tensor::trunc_normal({p, p, mid, c}, rng, kInitStd, true);
        b3 = Tensor::zeros({c}, true);
    }

    /// Single-stage variant: one PxP stride-P projection, no hidden convs.
    /// With P=1 this is a per-pixel linear embedding.
    static PatchEmbed single_stage(std::int64_t p, std::int64_t d, std::int64_t c,
                                   std::mt19937_64& rng) {
        PatchEmbed pe;
        pe.patch = p;
        pe.in_channels = d;
        pe.embed_dim = c;
        pe.hidden_stages = false;
        pe.w3 = Tensor::trunc_normal({p, p, d, c}, rng, kInitStd, true);
        pe.b3 = Tensor::zeros({c}, true);
        return pe;
    }

    /// (T,H,W,D) -> (T,H/P,W/P,C).
    Tensor apply(const Tensor& frames) const {
        check(frames.ndim() == 4, "patchify: input must be (T,H,W,D)");
        const std::int64_t h = frames.extent(1), w = frames.extent(2);
        if (h % patch != 0 || w % patch != 0) {
            throw std::runtime_error(
                "patchify: extents " + std::to_string(h) + "x" + std::to_string(w) +
                " not divisible by patch " + std::to_string(patch) + "; pad height by " +
                std::to_string((patch - h % patch) % patch) + " and width by " +
                std::to_string((patch - w % patch) % patch));
        }
        check(frames.extent(3) == in_channels, "patchify: channel extent mismatch");
        Tensor x = frames;
        if (hidden_stages) {
            x = gelu(conv2d(x, w1, b1, 1, 1));
            x = gelu(conv2d(x, w2, b2, 1, 1));
        }
        return conv2d(x, w3, b3, static_cast<int>(patch), 0);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        if (hidden_stages) {
            out.emplace_back(prefix + ".w1", w1);
            out.emplace_back(prefix + ".b1", b1);
            out.emplace_back(prefix + ".w2", w2);
            out.emplace_back(prefix + ".b2", b2);
        }
        out.emplace_back(prefix + ".w3", w3);
        out.emplace_back(prefix + ".b3", b3);
    }
};

/// Mirror of PatchEmbed: PxP transposed projection back to full resolution,
/// then two 3x3 refinement convolutions. The final convolution may start
/// zeroed so the head emits an exactly zero field at initialization.
struct Unpatchify {
    std::int64_t patch = 1;
    std::int64_t embed_dim = 0;
    std::int64_t out_channels = 0;
    Tensor w1, b1, w2, b2, w3, b3;

    Unpatchify() = default;
    Unpatchify(std::int64_t p, std::int64_t c, std::int64_t d, std::mt19937_64& rng,
               bool zero_final = true)
        : patch(p), embed_dim(c), out_channels(d) {
        const std::int64_t mid = c / 2 > 0 ? c / 2 : 1;
        w1 = Tensor::trunc_normal({p, p, c, mid}, rng, kInitStd, true);
        b1 = Tensor::zeros({mid}, true);
        w2 = Tensor::trunc_normal({3, 3, mid, mid}, rng, kInitStd, true);
        b2 = Tensor::zeros({mid}, true);
        w3 = zero_final ? Tensor::zeros({3, 3, mid, d}, true)
                        : Tensor::trunc_normal({3, 3, mid, d}, rng, kInitStd, true);
        b3 = Tensor::zeros({d}, true);
    }

    /// (B,H',W',C) -> (B,H'*P,W'*P,D).
    Tensor apply(const Tensor& tokens) const {
        Tensor x = gelu(conv2d_transpose_grid(tokens, w1, b1, static_cast<int>(patch)));
        x = gelu(conv2d(x, w2, b2, 1, 1));
        return conv2d(x, w3, b3, 1, 1);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".w1", w1);
        out.emplace_back(prefix + ".b1", b1);
        out.emplace_back(prefix + ".w2", w2);
        out.emplace_back(prefix + ".b2", b2);
        out.emplace_back(prefix + ".w3", w3);
        out.emplace_back(prefix + ".b3", b3);
    }
};

// ------------------------------------------------------------ spatial PE

/// Learnable (1,H',W',C) embedding broadcast-added over the time axis, so
/// every frame receives the identical addend.
struct SpatialPE {
    Tensor pe;

    SpatialPE() = default;
    SpatialPE(std::int64_t hp, std::int64_t wp, std::int64_t c, std::mt19937_64& rng) {
        pe = Tensor::trunc_normal({1, hp, wp, c}, rng, kInitStd, true);
    }

    Tensor apply(const Tensor& tokens) const { return add(tokens, pe); }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".pe", pe);
    }
};

// ----------------------------------------------------------------- FiLM

/// Temporal feature-wise modulation: a conditioning MLP maps the scalar
/// timestamp t to per-channel (gamma, beta); tokens of that frame become
/// gamma * tokens + beta. The final affine starts at zero with biases set
/// so gamma = 1 and beta = 0, making the layer the identity initially.
struct FiLMLayer {
    std::int64_t channels = 0;
    Linear fc1, fc2, fc3;

    FiLMLayer() = default;
    FiLMLayer(std::int64_t c, std::mt19937_64& rng)
        : channels(c), fc1(1, c, rng), fc2(c, c, rng), fc3(c, 2 * c, rng, /*zero_init=*/true) {
        for (std::int64_t i = 0; i < c; ++i) {
            fc3.b.data()[static_cast<std::size_t>(i)] = 1.0;  // gamma half
        }
    }

    /// tokens: (T,H',W',C); one timestamp per frame.
    Tensor apply(const Tensor& tokens, const std::vector<double>& timestamps) const {
        const std::int64_t t = tokens.extent(0);
        check(static_cast<std::int64_t>(timestamps.size()) == t,
              "film: expected one timestamp per frame");
        check(tokens.extent(3) == channels, "film: channel extent mismatch");
        std::vector<double> tv(timestamps.begin(), timestamps.end());
        Tensor tin = Tensor::from_data({t, 1}, std::move(tv));
        Tensor gb = fc3.apply(gelu(fc2.apply(gelu(fc1.apply(tin)))));  // (T,2C)
        Tensor gamma = reshape(slice(gb, 1, 0, channels), {t, 1, 1, channels});
        Tensor beta = reshape(slice(gb, 1, channels, channels), {t, 1, 1, channels});
        return add(mul(tokens, gamma), beta);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
        fc3.collect(prefix + ".fc3", out);
    }
};

// ------------------------------------------------------------- attention

/// Query-key score counter: every attention application adds
/// slices * heads * L^2 (one count per query-key logit). Used by the cost
/// accounting tests; has no effect on results.
inline std::uint64_t& attention_score_ops() {
    thread_local std::uint64_t count = 0;
    return count;
}

enum class Axis { time = 0, height = 1, width = 2 };

inline const char* axis_name(Axis a) {
    switch (a) {
        case Axis::time: return "time";
        case Axis::height: return "height";
        case Axis::width: return "width";
    }
    return "?";
}

/// Standard multi-head self-attention over (B,L,C): B independent slices
/// attend along their length-L axis. Q/K/V projections carry no biases: a
/// key bias shifts every logit in a softmax row equally and so receives
/// exactly zero gradient; the out-projection bias covers the value offset.
struct SelfAttention {
    std::int64_t channels = 0;
    std::int64_t heads = 1;
    Linear wq, wk, wv, wo;

    SelfAttention() = default;
    SelfAttention(std::int64_t c, std::int64_t h, std::mt19937_64& rng)
        : channels(c), heads(h), wq(c, c, rng, false, /*with_bias=*/false),
          wk(c, c, rng, false, /*with_bias=*/false), wv(c, c, rng, false, /*with_bias=*/false),
          wo(c, c, rng, /*zero_init=*/true) {
        check(c % h == 0, "attention: heads must divide channels");
    }

    Tensor apply(const Tensor& x) const {
        const std::int64_t bsz = x.extent(0), len = x.extent(1);
        const std::int64_t dh = channels / heads;
        auto split = [&](const Tensor& t) {
            // (B,L,C) -> (B*heads, L, dh)
            return reshape(permute(reshape(t, {bsz, len, heads, dh}), {0, 2, 1, 3}),
                           {bsz * heads, len, dh});
        };
        Tensor q = split(wq.apply(x));
        Tensor k = split(wk.apply(x));
        Tensor v = split(wv.apply(x));
        attention_score_ops() += static_cast<std::uint64_t>(bsz) *
                                 static_cast<std::uint64_t>(heads) *
                                 static_cast<std::uint64_t>(len) * static_cast<std::uint64_t>(len);
        Tensor logits = mul_scalar(bmm(q, k, false, true), 1.0 / std::sqrt(double(dh)));
        Tensor attn = softmax_lastdim(logits);
        Tensor ctx = bmm(attn, v);  // (B*heads, L, dh)
        Tensor merged = reshape(permute(reshape(ctx, {bsz, heads, len, dh}), {0, 2, 1, 3}),
                                {bsz, len, channels});
        return wo.apply(merged);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        wq.collect(prefix + ".wq", out);
        wk.collect(prefix + ".wk", out);
        wv.collect(prefix + ".wv", out);
        wo.collect(prefix + ".wo", out);
    }
};

/// Pre-norm transformer block attending along one axis of (T,H',W',C);
/// the other two axes act as batch. Output shape equals input shape.
struct AxialBlock {
    Axis axis = Axis::time;
    LayerNorm ln1, ln2;
    SelfAttention attn;
    Mlp mlp;

    AxialBlock() = default;
    AxialBlock(Axis a, std::int64_t c, std::int64_t mlp_dim, std::int64_t heads,
               std::mt19937_64& rng)
        : axis(a), ln1(c), ln2(c), attn(c, heads, rng),
          mlp(c, mlp_dim, c, rng, /*zero_out=*/true) {}

    Tensor apply(const Tensor& x) const {
        check(x.ndim() == 4, "axial block: input must be (T,H',W',C)");
        const std::int64_t t = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
        Tensor seq;      // (B,L,C)
        switch (axis) {
            case Axis::time:
                seq = reshape(permute(x, {1, 2, 0, 3}), {h * w, t, c});
                break;
            case Axis::height:
                seq = reshape(permute(x, {0, 2, 1, 3}), {t * w, h, c});
                break;
            case Axis::width:
                seq = reshape(x, {t * h, w, c});
                break;
            default:
                throw std::runtime_error("axial block: unknown axis");
        }
        seq = add(seq, attn.apply(ln1.apply(seq)));
        seq = add(seq, mlp.apply(ln2.apply(seq)));
        switch (axis) {
            case Axis::time:
                return permute(reshape(seq, {h, w, t, c}), {2, 0, 1, 3});
            case Axis::height:
                return permute(reshape(seq, {t, w, h, c}), {0, 2, 1, 3});
            default:
                return reshape(seq, {t, h, w, c});
        }
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        ln1.collect(prefix + ".ln1", out);
        attn.collect(prefix + ".attn", out);
        ln2.collect(prefix + ".ln2", out);
        mlp.collect(prefix + ".mlp", out);
    }
};

/// Axial axis for global block index i under the repeating
/// (time, height, width) stacking order.
inline Axis axis_for_block(std::int64_t i) { return static_cast<Axis>(i % 3); }

}  // namespace tante
