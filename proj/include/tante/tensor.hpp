#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// The op set is exactly what the model stack needs: elementwise arithmetic
// with numpy-style broadcasting, (batched) matmul, shape ops, softmax,
// layer-norm, GELU, sigmoid, conv2d and grid-aligned transposed conv2d.
// Gradients accumulate across backward() calls; call zero_grad() to reset.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

namespace tante {

using Shape = std::vector<std::int64_t>;

inline void check(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::runtime_error(msg);
    }
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << s[i] << (i + 1 < s.size() ? "," : "");
    }
    os << ')';
    return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) {
        n *= e;
    }
    return n;
}

// ---------------------------------------------------------------- grad mode

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the guard's lifetime (inference mode).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ------------------------------------------------------------------- impl

namespace detail {

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

/// Per-backward-call gradient buffers, keyed by node. Propagation writes
/// here; persistent .grad is only touched once at the end of the pass so
/// repeated backward() calls accumulate cleanly.
struct GradSink {
    std::unordered_map<TensorImpl*, std::vector<double>> buf;

    // Returns the buffer for `node`, or nullptr when the node needs no grad.
    std::vector<double>* get(const ImplPtr& node);
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // persistent, same size as data once allocated
    bool requires_grad = false;
    std::vector<ImplPtr> parents;
    std::function<void(const std::vector<double>& gout, GradSink&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

inline std::vector<double>* GradSink::get(const ImplPtr& node) {
    if (!node->requires_grad) {
        return nullptr;
    }
    auto& b = buf[node.get()];
    if (b.empty()) {
        b.assign(node->data.size(), 0.0);
    }
    return &b;
}

inline Shape row_major_strides(const Shape& s) {
    Shape st(s.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= s[static_cast<std::size_t>(i)];
    }
    return st;
}

}  // namespace detail

// ------------------------------------------------------------------ Tensor

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false) {
        return make(std::move(s), 0.0, requires_grad);
    }
    static Tensor ones(Shape s, bool requires_grad = false) {
        return make(std::move(s), 1.0, requires_grad);
    }
    static Tensor full(Shape s, double v, bool requires_grad = false) {
        return make(std::move(s), v, requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return make({1}, v, requires_grad);
    }
    static Tensor from_data(Shape s, std::vector<double> v, bool requires_grad = false) {
        check(shape_numel(s) == static_cast<std::int64_t>(v.size()),
              "from_data: shape " + shape_str(s) + " does not match value count " +
                  std::to_string(v.size()));
        auto impl = std::make_shared<detail::TensorImpl>();
        impl->shape = std::move(s);
        impl->data = std::move(v);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }
    static Tensor randn(Shape s, std::mt19937_64& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        std::normal_distribution<double> dist(0.0, stddev);
        Tensor t = zeros(std::move(s), requires_grad);
        for (auto& v : t.data()) {
            v = dist(rng);
        }
        return t;
    }
    /// Normal(0, stddev) resampled until within 2 stddev (ViT-style init).
    static Tensor trunc_normal(Shape s, std::mt19937_64& rng, double stddev,
                               bool requires_grad = false) {
        std::normal_distribution<double> dist(0.0, stddev);
        Tensor t = zeros(std::move(s), requires_grad);
        for (auto& v : t.data()) {
            double x = dist(rng);
            while (std::abs(x) > 2.0 * stddev) {
                x = dist(rng);
            }
            v = x;
        }
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t size() const { return impl_->numel(); }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t extent(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    double item() const {
        check(size() == 1, "item(): tensor has " + std::to_string(size()) + " elements");
        return impl_->data[0];
    }
    double at(const Shape& idx) const {
        check(static_cast<int>(idx.size()) == ndim(), "at(): index rank mismatch");
        auto st = detail::row_major_strides(impl_->shape);
        std::int64_t off = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            off += idx[i] * st[i];
        }
        return impl_->data[static_cast<std::size_t>(off)];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) {
        check(!impl_->backward_fn, "set_requires_grad: only valid on leaf tensors");
        impl_->requires_grad = rg;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const {
        check(has_grad(), "grad(): no gradient has been accumulated");
        return impl_->grad;
    }
    std::vector<double>& grad_ref() {
        if (impl_->grad.empty()) {
            impl_->grad.assign(impl_->data.size(), 0.0);
        }
        return impl_->grad;
    }
    Tensor grad_tensor() const { return from_data(impl_->shape, grad()); }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

    /// Data copy with no graph attached.
    Tensor detach() const { return from_data(impl_->shape, impl_->data); }

    /// Reverse-mode sweep from a scalar. Gradients of every reachable
    /// requires_grad tensor are accumulated into their persistent buffers.
    void backward() const;

    detail::ImplPtr impl() const { return impl_; }
    explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

private:
    static Tensor make(Shape s, double fill, bool rg) {
        auto impl = std::make_shared<detail::TensorImpl>();
        const auto n = static_cast<std::size_t>(shape_numel(s));
        impl->shape = std::move(s);
        impl->data.assign(n, fill);
        impl->requires_grad = rg;
        return Tensor(std::move(impl));
    }

    detail::ImplPtr impl_;
};

namespace detail {

inline bool track_grad(std::initializer_list<const Tensor*> ins) {
    if (!grad_enabled()) {
        return false;
    }
    for (const Tensor* t : ins) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline Tensor make_result(Shape s, std::vector<double> vals, bool tracked,
                          std::vector<ImplPtr> parents,
                          std::function<void(const std::vector<double>&, GradSink&)> fn) {
    Tensor out = Tensor::from_data(std::move(s), std::move(vals), tracked);
    if (tracked) {
        out.impl()->parents = std::move(parents);
        out.impl()->backward_fn = std::move(fn);
    }
    return out;
}

}  // namespace detail

inline void Tensor::backward() const {
    check(size() == 1, "backward(): loss must be a scalar, got shape " + shape_str(shape()));

    // Reverse post-order DFS over parent edges = topological order
    // (consumers before producers).
    std::vector<detail::TensorImpl*> topo;
    std::unordered_map<detail::TensorImpl*, detail::ImplPtr> hold;
    {
        std::unordered_set<detail::TensorImpl*> visited;
        std::vector<std::pair<detail::ImplPtr, std::size_t>> stack;
        stack.emplace_back(impl_, 0);
        visited.insert(impl_.get());
        hold[impl_.get()] = impl_;
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                auto child = node->parents[next++];
                if (visited.insert(child.get()).second) {
                    hold[child.get()] = child;
                    stack.emplace_back(std::move(child), 0);
                }
            } else {
                topo.push_back(node.get());
                stack.pop_back();
            }
        }
        std::reverse(topo.begin(), topo.end());
    }

    detail::GradSink sink;
    sink.buf[impl_.get()] = {1.0};
    for (auto* node : topo) {
        if (!node->backward_fn) {
            continue;
        }
        auto it = sink.buf.find(node);
        if (it == sink.buf.end() || it->second.empty()) {
            continue;  // node received no gradient
        }
        node->backward_fn(it->second, sink);
    }

    for (auto& [node, buf] : sink.buf) {
        if (!node->requires_grad || buf.empty()) {
            continue;
        }
        if (node->grad.empty()) {
            node->grad.assign(node->data.size(), 0.0);
        }
        for (std::size_t i = 0; i < buf.size(); ++i) {
            node->grad[i] += buf[i];
        }
    }
}

// ----------------------------------------------------------- broadcasting

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t ea = i < n - a.size() ? 1 : a[i - (n - a.size())];
        const std::int64_t eb = i < n - b.size() ? 1 : b[i - (n - b.size())];
        check(ea == eb || ea == 1 || eb == 1,
              "broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `s` when broadcast against `out` (0 on expanded axes).
inline Shape broadcast_strides(const Shape& s, const Shape& out) {
    Shape st(out.size(), 0);
    const Shape own = row_major_strides(s);
    const std::size_t off = out.size() - s.size();
    for (std::size_t i = 0; i < s.size(); ++i) {
        st[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : own[i];
    }
    return st;
}

// Calls fn(out_flat, a_flat, b_flat) for every element of the broadcast
// result shape.
template <class Fn>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
    const Shape stri_a = broadcast_strides(sa, out);
    const Shape stri_b = broadcast_strides(sb, out);
    const std::int64_t n = shape_numel(out);
    const std::size_t rank = out.size();
    Shape idx(rank, 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        fn(flat, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            idx[d]++;
            ia += stri_a[d];
            ib += stri_b[d];
            if (idx[d] < out[d]) {
                break;
            }
            idx[d] = 0;
            ia -= stri_a[d] * out[d];
            ib -= stri_b[d] * out[d];
        }
    }
}

template <class FwdFn, class BwdFn>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
    const bool tracked = track_grad({&a, &b});
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();

    if (sa == sb) {  // fast path, no index arithmetic
        const auto& da = a.data();
        const auto& db = b.data();
        std::vector<double> vals(da.size());
        for (std::size_t i = 0; i < da.size(); ++i) {
            vals[i] = fwd(da[i], db[i]);
        }
        auto pa = a.impl();
        auto pb = b.impl();
        return make_result(
            sa, std::move(vals), tracked, {pa, pb},
            [pa, pb, bwd](const std::vector<double>& gout, GradSink& sink) {
                std::vector<double>* ga = sink.get(pa);
                std::vector<double>* gb = sink.get(pb);
                for (std::size_t i = 0; i < gout.size(); ++i) {
                    double da_, db_;
                    bwd(pa->data[i], pb->data[i], gout[i], da_, db_);
                    if (ga) (*ga)[i] += da_;
                    if (gb) (*gb)[i] += db_;
                }
            });
    }

    const Shape out = broadcast_shape(sa, sb);
    std::vector<double> vals(static_cast<std::size_t>(shape_numel(out)));
    const auto& da = a.data();
    const auto& db = b.data();
    for_each_broadcast(out, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
        vals[static_cast<std::size_t>(o)] =
            fwd(da[static_cast<std::size_t>(ia)], db[static_cast<std::size_t>(ib)]);
    });
    auto pa = a.impl();
    auto pb = b.impl();
    return make_result(
        out, std::move(vals), tracked, {pa, pb},
        [pa, pb, out, bwd](const std::vector<double>& gout, GradSink& sink) {
            std::vector<double>* ga = sink.get(pa);
            std::vector<double>* gb = sink.get(pb);
            for_each_broadcast(out, pa->shape, pb->shape,
                               [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                                   double da_, db_;
                                   bwd(pa->data[static_cast<std::size_t>(ia)],
                                       pb->data[static_cast<std::size_t>(ib)],
                                       gout[static_cast<std::size_t>(o)], da_, db_);
                                   if (ga) (*ga)[static_cast<std::size_t>(ia)] += da_;
                                   if (gb) (*gb)[static_cast<std::size_t>(ib)] += db_;
                               });
        });
}

template <class FwdFn, class BwdFn>
Tensor unary_op(const Tensor& x, FwdFn fwd, BwdFn bwd) {
    const bool tracked = track_grad({&x});
    const auto& dx = x.data();
    std::vector<double> vals(dx.size());
    for (std::size_t i = 0; i < dx.size(); ++i) {
        vals[i] = fwd(dx[i]);
    }
    auto px = x.impl();
    return make_result(x.shape(), std::move(vals), tracked, {px},
                       [px, bwd](const std::vector<double>& gout, GradSink& sink) {
                           std::vector<double>* gx = sink.get(px);
                           if (!gx) return;
                           for (std::size_t i = 0; i < gout.size(); ++i) {
                               (*gx)[i] += bwd(px->data[i]) * gout[i];
                           }
                       });
}

}  // namespace detail

// ---------------------------------------------------------- elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

inline Tensor neg(const Tensor& x) {
    return detail::unary_op(x, [](double v) { return -v; }, [](double) { return -1.0; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary_op(x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
    return detail::unary_op(x, [c](double v) { return v * c; }, [c](double) { return c; });
}

inline Tensor pow_scalar(const Tensor& x, double e) {
    return detail::unary_op(
        x, [e](double v) { return std::pow(v, e); },
        [e](double v) {
            if (v == 0.0) {
                return e == 1.0 ? 1.0 : 0.0;  // subgradient at the hinge
            }
            return e * std::pow(v, e - 1.0);
        });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(
        x,
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double v) {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 - s);
        });
}

// Exact Gaussian-CDF GELU (not the tanh approximation): x * Phi(x).
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::unary_op(
        x,
        [](double v) { return 0.5 * v * std::erfc(-v * inv_sqrt2); },
        [](double v) {
            const double cdf = 0.5 * std::erfc(-v * inv_sqrt2);
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
        });
}

// ------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
    const bool tracked = detail::track_grad({&x});
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    auto px = x.impl();
    return detail::make_result({1}, {acc}, tracked, {px},
                               [px](const std::vector<double>& gout, detail::GradSink& sink) {
                                   auto* gx = sink.get(px);
                                   if (!gx) return;
                                   for (auto& g : *gx) {
                                       g += gout[0];
                                   }
                               });
}

inline Tensor mean(const Tensor& x) {
    const bool tracked = detail::track_grad({&x});
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    const double inv_n = 1.0 / static_cast<double>(x.size());
    auto px = x.impl();
    return detail::make_result({1}, {acc * inv_n}, tracked, {px},
                               [px, inv_n](const std::vector<double>& gout, detail::GradSink& sink) {
                                   auto* gx = sink.get(px);
                                   if (!gx) return;
                                   const double g = gout[0] * inv_n;
                                   for (auto& v : *gx) {
                                       v += g;
                                   }
                               });
}

// --------------------------------------------------------------- shape ops

inline Tensor reshape(const Tensor& x, Shape s) {
    // One extent may be -1 (inferred).
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == -1) {
            check(infer < 0, "reshape: at most one -1 extent");
            infer = static_cast<int>(i);
        } else {
            known *= s[i];
        }
    }
    if (infer >= 0) {
        check(known != 0 && x.size() % known == 0,
              "reshape: cannot infer extent for " + shape_str(s));
        s[static_cast<std::size_t>(infer)] = x.size() / known;
    }
    check(shape_numel(s) == x.size(),
          "reshape: size mismatch " + shape_str(x.shape()) + " -> " + shape_str(s));
    const bool tracked = detail::track_grad({&x});
    auto px = x.impl();
    return detail::make_result(std::move(s), x.data(), tracked, {px},
                               [px](const std::vector<double>& gout, detail::GradSink& sink) {
                                   auto* gx = sink.get(px);
                                   if (!gx) return;
                                   for (std::size_t i = 0; i < gout.size(); ++i) {
                                       (*gx)[i] += gout[i];
                                   }
                               });
}

inline Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    const int rank = x.ndim();
    check(static_cast<int>(axes.size()) == rank, "permute: axes rank mismatch");
    std::vector<bool> seen(axes.size(), false);
    for (int a : axes) {
        check(a >= 0 && a < rank && !seen[static_cast<std::size_t>(a)], "permute: invalid axes");
        seen[static_cast<std::size_t>(a)] = true;
    }
    const Shape& sx = x.shape();
    Shape out(sx.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        out[i] = sx[static_cast<std::size_t>(axes[i])];
    }
    const Shape in_strides = detail::row_major_strides(sx);
    // Walking the output in order while stepping the input by permuted strides.
    Shape step(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        step[i] = in_strides[static_cast<std::size_t>(axes[i])];
    }
    const std::int64_t n = x.size();
    std::vector<double> vals(static_cast<std::size_t>(n));
    const auto& dx = x.data();
    {
        Shape idx(out.size(), 0);
        std::int64_t src = 0;
        for (std::int64_t flat = 0; flat < n; ++flat) {
            vals[static_cast<std::size_t>(flat)] = dx[static_cast<std::size_t>(src)];
            for (std::size_t d = out.size(); d-- > 0;) {
                idx[d]++;
                src += step[d];
                if (idx[d] < out[d]) {
                    break;
                }
                idx[d] = 0;
                src -= step[d] * out[d];
            }
        }
    }
    const bool tracked = detail::track_grad({&x});
    auto px = x.impl();
    return detail::make_result(out, std::move(vals), tracked, {px},
                               [px, out, step](const std::vector<double>& gout,
                                               detail::GradSink& sink) {
                                   auto* gx = sink.get(px);
                                   if (!gx) return;
                                   Shape idx(out.size(), 0);
                                   std::int64_t src = 0;
                                   const std::int64_t n = static_cast<std::int64_t>(gout.size());
                                   for (std::int64_t flat = 0; flat < n; ++flat) {
                                       (*gx)[static_cast<std::size_t>(src)] +=
                                           gout[static_cast<std::size_t>(flat)];
                                       for (std::size_t d = out.size(); d-- > 0;) {
                                           idx[d]++;
                                           src += step[d];
                                           if (idx[d] < out[d]) {
                                               break;
                                           }
                                           idx[d] = 0;
                                           src -= step[d] * out[d];
                                       }
                                   }
                               });
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
    const Shape& sx = x.shape();
    check(axis >= 0 && axis < x.ndim(), "slice: bad axis");
    const auto ax = static_cast<std::size_t>(axis);
    check(start >= 0 && len >= 1 && start + len <= sx[ax], "slice: out of range");
    Shape out = sx;
    out[ax] = len;

    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) {
        outer *= sx[i];
    }
    for (std::size_t i = ax + 1; i < sx.size(); ++i) {
        inner *= sx[i];
    }
    const std::int64_t in_axis = sx[ax];
    std::vector<double> vals(static_cast<std::size_t>(outer * len * inner));
    const auto& dx = x.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = dx.data() + (o * in_axis + start) * inner;
        double* dst = vals.data() + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    const bool tracked = detail::track_grad({&x});
    auto px = x.impl();
    return detail::make_result(
        out, std::move(vals), tracked, {px},
        [px, outer, inner, len, in_axis, start](const std::vector<double>& gout,
                                                detail::GradSink& sink) {
            auto* gx = sink.get(px);
            if (!gx) return;
            for (std::int64_t o = 0; o < outer; ++o) {
                const double* src = gout.data() + o * len * inner;
                double* dst = gx->data() + (o * in_axis + start) * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) {
                    dst[i] += src[i];
                }
            }
        });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    check(axis >= 0 && axis < parts[0].ndim(), "concat: bad axis");
    const auto ax = static_cast<std::size_t>(axis);
    std::int64_t axis_total = 0;
    for (const auto& p : parts) {
        check(p.ndim() == parts[0].ndim(), "concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i) {
            check(i == ax || p.shape()[i] == s0[i], "concat: extent mismatch off-axis");
        }
        axis_total += p.shape()[ax];
    }
    Shape out = s0;
    out[ax] = axis_total;

    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) {
        outer *= s0[i];
    }
    for (std::size_t i = ax + 1; i < s0.size(); ++i) {
        inner *= s0[i];
    }
    std::vector<double> vals(static_cast<std::size_t>(outer * axis_total * inner));
    std::int64_t pos = 0;
    for (const auto& p : parts) {
        const std::int64_t plen = p.shape()[ax];
        const auto& dp = p.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = dp.data() + o * plen * inner;
            double* dst = vals.data() + (o * axis_total + pos) * inner;
            std::copy(src, src + plen * inner, dst);
        }
        pos += plen;
    }

    bool tracked = false;
    if (grad_enabled()) {
        for (const auto& p : parts) {
            tracked = tracked || p.requires_grad();
        }
    }
    std::vector<detail::ImplPtr> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) {
        parents.push_back(p.impl());
    }
    auto parents_copy = parents;
    return detail::make_result(
        out, std::move(vals), tracked, std::move(parents),
        [parents_copy, outer, inner, axis_total, ax](const std::vector<double>& gout,
                                                     detail::GradSink& sink) {
            std::int64_t pos = 0;
            for (const auto& pp : parents_copy) {
                const std::int64_t plen = pp->shape[ax];
                auto* gp = sink.get(pp);
                if (gp) {
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = gout.data() + (o * axis_total + pos) * inner;
                        double* dst = gp->data() + o * plen * inner;
                        for (std::int64_t i = 0; i < plen * inner; ++i) {
                            dst[i] += src[i];
                        }
                    }
                }
                pos += plen;
            }
        });
}

// ------------------------------------------------------------------- gemm

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// C (+)= op(A) * op(B) with row-major buffers.
inline void gemm(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                 std::int64_t n, bool ta, bool tb, bool accumulate) {
    ECMap A(a, ta ? k : m, ta ? m : k);
    ECMap B(b, tb ? n : k, tb ? k : n);
    EMap C(c, m, n);
    if (!ta && !tb) {
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

}  // namespace detail

/// 2-D matrix product (M,K) x (K,N) -> (M,N).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2, "matmul: expects rank-2 inputs");
    const std::int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    check(b.extent(0) == k, "matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
    std::vector<double> vals(static_cast<std::size_t>(m * n));
    detail::gemm(a.data().data(), b.data().data(), vals.data(), m, k, n, false, false, false);
    const bool tracked = detail::track_grad({&a, &b});
    auto pa = a.impl();
    auto pb = b.impl();
    return detail::make_result({m, n}, std::move(vals), tracked, {pa, pb},
                               [pa, pb, m, k, n](const std::vector<double>& gout,
                                                 detail::GradSink& sink) {
                                   if (auto* ga = sink.get(pa)) {
                                       // dA = G * B^T
                                       detail::gemm(gout.data(), pb->data.data(), ga->data(), m, n,
                                                    k, false, true, true);
                                   }
                                   if (auto* gb = sink.get(pb)) {
                                       // dB = A^T * G
                                       detail::gemm(pa->data.data(), gout.data(), gb->data(), k, m,
                                                    n, true, false, true);
                                   }
                               });
}

/// Batched matrix product (B,M,K) x (B,K,N) -> (B,M,N); either side may be
/// flagged as transposed in its trailing two axes.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
    check(a.ndim() == 3 && b.ndim() == 3, "bmm: expects rank-3 inputs");
    const std::int64_t batch = a.extent(0);
    check(b.extent(0) == batch, "bmm: batch extents differ");
    const std::int64_t m = ta ? a.extent(2) : a.extent(1);
    const std::int64_t k = ta ? a.extent(1) : a.extent(2);
    const std::int64_t kb = tb ? b.extent(2) : b.extent(1);
    const std::int64_t n = tb ? b.extent(1) : b.extent(2);
    check(k == kb, "bmm: inner extents differ");
    const std::int64_t a_sz = a.extent(1) * a.extent(2);
    const std::int64_t b_sz = b.extent(1) * b.extent(2);
    std::vector<double> vals(static_cast<std::size_t>(batch * m * n));
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::gemm(a.data().data() + i * a_sz, b.data().data() + i * b_sz,
                     vals.data() + i * m * n, m, k, n, ta, tb, false);
    }
    const bool tracked = detail::track_grad({&a, &b});
    auto pa = a.impl();
    auto pb = b.impl();
    return detail::make_result(
        {batch, m, n}, std::move(vals), tracked, {pa, pb},
        [pa, pb, batch, m, k, n, a_sz, b_sz, ta, tb](const std::vector<double>& gout,
                                                     detail::GradSink& sink) {
            auto* ga = sink.get(pa);
            auto* gb = sink.get(pb);
            for (std::int64_t i = 0; i < batch; ++i) {
                const double* g = gout.data() + i * m * n;
                const double* av = pa->data.data() + i * a_sz;
                const double* bv = pb->data.data() + i * b_sz;
                if (ga) {
                    double* gav = ga->data() + i * a_sz;
                    if (!ta) {
                        // dA = G * op(B)^T
                        detail::gemm(g, bv, gav, m, n, k, false, !tb, true);
                    } else {
                        // dA^T accumulated directly in A's layout: dA = op(B) * G^T
                        detail::gemm(bv, g, gav, k, n, m, tb, true, true);
                    }
                }
                if (gb) {
                    double* gbv = gb->data() + i * b_sz;
                    if (!tb) {
                        // dB = op(A)^T * G
                        detail::gemm(av, g, gbv, k, m, n, !ta, false, true);
                    } else {
                        // dB = G^T * op(A)
                        detail::gemm(g, av, gbv, n, m, k, true, ta, true);
                    }
                }
            }
        });
}

// ------------------------------------------------------- softmax / layernorm

/// Softmax over the trailing axis.
inline Tensor softmax_lastdim(const Tensor& x) {
    check(x.ndim() >= 1, "softmax: rank must be >= 1");
    const std::int64_t c = x.extent(x.ndim() - 1);
    const std::int64_t rows = x.size() / c;
    std::vector<double> vals(static_cast<std::size_t>(x.size()));
    const auto& dx = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = dx.data() + r * c;
        double* out = vals.data() + r * c;
        double mx = in[0];
        for (std::int64_t i = 1; i < c; ++i) {
            mx = std::max(mx, in[i]);
        }
        double denom = 0.0;
        for (std::int64_t i = 0; i < c; ++i) {
            out[i] = std::exp(in[i] - mx);
            denom += out[i];
        }
        const double inv = 1.0 / denom;
        for (std::int64_t i = 0; i < c; ++i) {
            out[i] *= inv;
        }
    }
    const bool tracked = detail::track_grad({&x});
    auto px = x.impl();
    auto vals_copy = vals;  // backward needs y
    return detail::make_result(
        x.shape(), std::move(vals), tracked, {px},
        [px, rows, c, y = std::move(vals_copy)](const std::vector<double>& gout,
                                                detail::GradSink& sink) {
            auto* gx = sink.get(px);
            if (!gx) return;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = y.data() + r * c;
                const double* gr = gout.data() + r * c;
                double dot = 0.0;
                for (std::int64_t i = 0; i < c; ++i) {
                    dot += yr[i] * gr[i];
                }
                double* gxr = gx->data() + r * c;
                for (std::int64_t i = 0; i < c; ++i) {
                    gxr[i] += yr[i] * (gr[i] - dot);
                }
            }
        });
}

/// Layer normalization over the trailing axis with learnable gain/bias of
/// shape (C).
inline Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gain, const Tensor& bias,
                                 double eps = 1e-5) {
    const std::int64_t c = x.extent(x.ndim() - 1);
    check(gain.size() == c && bias.size() == c, "layer_norm: gain/bias must have C elements");
    const std::int64_t rows = x.size() / c;
    std::vector<double> vals(static_cast<std::size_t>(x.size()));
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    std::vector<double> xhat(static_cast<std::size_t>(x.size()));
    const auto& dx = x.data();
    const auto& dg = gain.data();
    const auto& db = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = dx.data() + r * c;
        double mu = 0.0;
        for (std::int64_t i = 0; i < c; ++i) {
            mu += in[i];
        }
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t i = 0; i < c; ++i) {
            const double d = in[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        double* xh = xhat.data() + r * c;
        double* out = vals.data() + r * c;
        for (std::int64_t i = 0; i < c; ++i) {
            xh[i] = (in[i] - mu) * is;
            out[i] = xh[i] * dg[static_cast<std::size_t>(i)] + db[static_cast<std::size_t>(i)];
        }
    }
    const bool tracked = detail::track_grad({&x, &gain, &bias});
    auto px = x.impl();
    auto pg = gain.impl();
    auto pb = bias.impl();
    return detail::make_result(
        x.shape(), std::move(vals), tracked, {px, pg, pb},
        [px, pg, pb, rows, c, is = std::move(inv_sigma), xh = std::move(xhat)](
            const std::vector<double>& gout, detail::GradSink& sink) {
            auto* gx = sink.get(px);
            auto* gg = sink.get(pg);
            auto* gb = sink.get(pb);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gr = gout.data() + r * c;
                const double* xhr = xh.data() + r * c;
                if (gg || gb) {
                    for (std::int64_t i = 0; i < c; ++i) {
                        if (gg) (*gg)[static_cast<std::size_t>(i)] += gr[i] * xhr[i];
                        if (gb) (*gb)[static_cast<std::size_t>(i)] += gr[i];
                    }
                }
                if (gx) {
                    // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * is
                    double m1 = 0.0, m2 = 0.0;
                    for (std::int64_t i = 0; i < c; ++i) {
                        const double dxh = gr[i] * pg->data[static_cast<std::size_t>(i)];
                        m1 += dxh;
                        m2 += dxh * xhr[i];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    double* gxr = gx->data() + r * c;
                    const double s = is[static_cast<std::size_t>(r)];
                    for (std::int64_t i = 0; i < c; ++i) {
                        const double dxh = gr[i] * pg->data[static_cast<std::size_t>(i)];
                        gxr[i] += (dxh - m1 - xhr[i] * m2) * s;
                    }
                }
            }
        });
}

// ----------------------------------------------------------- convolutions

namespace detail {

// im2col for NHWC input; columns laid out (B*Ho*Wo, kh*kw*Ci).
inline void im2col(const double* x, std::int64_t bsz, std::int64_t h, std::int64_t w,
                   std::int64_t ci, std::int64_t kh, std::int64_t kw, std::int64_t stride,
                   std::int64_t pad, std::int64_t ho, std::int64_t wo, double* col) {
    const std::int64_t patch = kh * kw * ci;
    for (std::int64_t b = 0; b < bsz; ++b) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double* dst = col + ((b * ho + oy) * wo + ox) * patch;
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        double* d = dst + (ky * kw + kx) * ci;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                            std::fill(d, d + ci, 0.0);
                        } else {
                            const double* s = x + ((b * h + iy) * w + ix) * ci;
                            std::copy(s, s + ci, d);
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_accum(const double* col, std::int64_t bsz, std::int64_t h, std::int64_t w,
                         std::int64_t ci, std::int64_t kh, std::int64_t kw, std::int64_t stride,
                         std::int64_t pad, std::int64_t ho, std::int64_t wo, double* gx) {
    const std::int64_t patch = kh * kw * ci;
    for (std::int64_t b = 0; b < bsz; ++b) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                const double* src = col + ((b * ho + oy) * wo + ox) * patch;
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        const double* s = src + (ky * kw + kx) * ci;
                        double* d = gx + ((b * h + iy) * w + ix) * ci;
                        for (std::int64_t cc = 0; cc < ci; ++cc) {
                            d[cc] += s[cc];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D convolution on NHWC input. x: (B,H,W,Ci), w: (kh,kw,Ci,Co), b: (Co).
/// Output spatial extents must come out integral for the given stride.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check(x.ndim() == 4 && w.ndim() == 4, "conv2d: x must be (B,H,W,Ci), w (kh,kw,Ci,Co)");
    const std::int64_t bsz = x.extent(0), h = x.extent(1), ww = x.extent(2), ci = x.extent(3);
    const std::int64_t kh = w.extent(0), kw = w.extent(1), co = w.extent(3);
    check(w.extent(2) == ci, "conv2d: channel mismatch");
    check(b.size() == co, "conv2d: bias size mismatch");
    check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const std::int64_t ho_num = h + 2 * pad - kh;
    const std::int64_t wo_num = ww + 2 * pad - kw;
    check(ho_num >= 0 && wo_num >= 0 && ho_num % stride == 0 && wo_num % stride == 0,
          "conv2d: extents not compatible with kernel/stride/pad");
    const std::int64_t ho = ho_num / stride + 1;
    const std::int64_t wo = wo_num / stride + 1;

    const std::int64_t patch = kh * kw * ci;
    const std::int64_t ncols = bsz * ho * wo;
    std::vector<double> col(static_cast<std::size_t>(ncols * patch));
    detail::im2col(x.data().data(), bsz, h, ww, ci, kh, kw, stride, pad, ho, wo, col.data());

    std::vector<double> vals(static_cast<std::size_t>(ncols * co));
    detail::gemm(col.data(), w.data().data(), vals.data(), ncols, patch, co, false, false, false);
    const auto& db = b.data();
    for (std::int64_t r = 0; r < ncols; ++r) {
        double* out = vals.data() + r * co;
        for (std::int64_t cc = 0; cc < co; ++cc) {
            out[cc] += db[static_cast<std::size_t>(cc)];
        }
    }

    const bool tracked = detail::track_grad({&x, &w, &b});
    auto px = x.impl();
    auto pw = w.impl();
    auto pb = b.impl();
    const int s = stride, p = pad;
    return detail::make_result(
        {bsz, ho, wo, co}, std::move(vals), tracked, {px, pw, pb},
        [px, pw, pb, bsz, h, ww, ci, kh, kw, co, ho, wo, s, p, patch,
         ncols](const std::vector<double>& gout, detail::GradSink& sink) {
            auto* gx = sink.get(px);
            auto* gw = sink.get(pw);
            auto* gb = sink.get(pb);
            if (gb) {
                for (std::int64_t r = 0; r < ncols; ++r) {
                    const double* g = gout.data() + r * co;
                    for (std::int64_t cc = 0; cc < co; ++cc) {
                        (*gb)[static_cast<std::size_t>(cc)] += g[cc];
                    }
                }
            }
            if (gw || gx) {
                // The column matrix is cheap to rebuild relative to holding it.
                std::vector<double> col(static_cast<std::size_t>(ncols * patch));
                if (gw) {
                    detail::im2col(px->data.data(), bsz, h, ww, ci, kh, kw, s, p, ho, wo,
                                   col.data());
                    // dW = col^T * G
                    detail::gemm(col.data(), gout.data(), gw->data(), patch, ncols, co, true,
                                 false, true);
                }
                if (gx) {
                    // dcol = G * W^T, scattered back
                    detail::gemm(gout.data(), pw->data.data(), col.data(), ncols, co, patch,
                                 false, true, false);
                    detail::col2im_accum(col.data(), bsz, h, ww, ci, kh, kw, s, p, ho, wo,
                                         gx->data());
                }
            }
        });
}

/// Transposed convolution restricted to kernel == stride == P (grid
/// upsampling): x (B,h,w,Ci) -> (B,h*P,w*P,Co) with w: (P,P,Ci,Co).
inline Tensor conv2d_transpose_grid(const Tensor& x, const Tensor& w, const Tensor& b, int patch) {
    check(x.ndim() == 4 && w.ndim() == 4, "tconv2d: x must be (B,h,w,Ci), w (P,P,Ci,Co)");
    const std::int64_t bsz = x.extent(0), hi = x.extent(1), wi = x.extent(2), ci = x.extent(3);
    const std::int64_t pp = patch;
    check(w.extent(0) == pp && w.extent(1) == pp && w.extent(2) == ci,
          "tconv2d: weight shape mismatch");
    const std::int64_t co = w.extent(3);
    check(b.size() == co, "tconv2d: bias size mismatch");

    // Per input pixel: a Ci -> (P*P*Co) linear map, scattered into the output.
    const std::int64_t rows = bsz * hi * wi;
    const std::int64_t ext = pp * pp * co;
    std::vector<double> flat(static_cast<std::size_t>(rows * ext));
    detail::gemm(x.data().data(), w.data().data(), flat.data(), rows, ci, ext, false, false,
                 false);

    const std::int64_t ho = hi * pp, wo = wi * pp;
    std::vector<double> vals(static_cast<std::size_t>(bsz * ho * wo * co));
    const auto& db = b.data();
    for (std::int64_t bb = 0; bb < bsz; ++bb) {
        for (std::int64_t y = 0; y < hi; ++y) {
            for (std::int64_t xcol = 0; xcol < wi; ++xcol) {
                const double* src = flat.data() + ((bb * hi + y) * wi + xcol) * ext;
                for (std::int64_t dy = 0; dy < pp; ++dy) {
                    for (std::int64_t dx2 = 0; dx2 < pp; ++dx2) {
                        double* dst =
                            vals.data() +
                            ((bb * ho + y * pp + dy) * wo + xcol * pp + dx2) * co;
                        const double* s = src + (dy * pp + dx2) * co;
                        for (std::int64_t cc = 0; cc < co; ++cc) {
                            dst[cc] = s[cc] + db[static_cast<std::size_t>(cc)];
                        }
                    }
                }
            }
        }
    }

    const bool tracked = detail::track_grad({&x, &w, &b});
    auto px = x.impl();
    auto pw = w.impl();
    auto pb = b.impl();
    return detail::make_result(
        {bsz, ho, wo, co}, std::move(vals), tracked, {px, pw, pb},
        [px, pw, pb, bsz, hi, wi, ci, pp, co, ho, wo, rows, ext](const std::vector<double>& gout,
                                                                 detail::GradSink& sink) {
            auto* gx = sink.get(px);
            auto* gw = sink.get(pw);
            auto* gb = sink.get(pb);
            if (gb) {
                const std::int64_t n = bsz * ho * wo;
                for (std::int64_t r = 0; r < n; ++r) {
                    const double* g = gout.data() + r * co;
                    for (std::int64_t cc = 0; cc < co; ++cc) {
                        (*gb)[static_cast<std::size_t>(cc)] += g[cc];
                    }
                }
            }
            if (gx || gw) {
                // Gather output grads back into the per-pixel flat layout.
                std::vector<double> gflat(static_cast<std::size_t>(rows * ext));
                for (std::int64_t bb = 0; bb < bsz; ++bb) {
                    for (std::int64_t y = 0; y < hi; ++y) {
                        for (std::int64_t xcol = 0; xcol < wi; ++xcol) {
                            double* dst = gflat.data() + ((bb * hi + y) * wi + xcol) * ext;
                            for (std::int64_t dy = 0; dy < pp; ++dy) {
                                for (std::int64_t dx2 = 0; dx2 < pp; ++dx2) {
                                    const double* src =
                                        gout.data() +
                                        ((bb * ho + y * pp + dy) * wo + xcol * pp + dx2) * co;
                                    std::copy(src, src + co, dst + (dy * pp + dx2) * co);
                                }
                            }
                        }
                    }
                }
                if (gx) {
                    // dX = Gflat * W^T
                    detail::gemm(gflat.data(), pw->data.data(), gx->data(), rows, ext, ci, false,
                                 true, true);
                }
                if (gw) {
                    // dW = X^T * Gflat
                    detail::gemm(px->data.data(), gflat.data(), gw->data(), ci, rows, ext, true,
                                 false, true);
                }
            }
        });
}

// ------------------------------------------------------------- operators

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

}  // namespace tante
