#pragma once

// Finite-difference gradient oracle. Central differences are the ground
// truth every analytic gradient in the library is checked against.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tante/tensor.hpp"

namespace tante {

/// Central-difference gradient of a scalar function at x, element by
/// element: (f(x + h e_i) - f(x - h e_i)) / (2h). Restores x afterwards.
inline Tensor finite_difference_grad(const std::function<double()>& f, Tensor x,
                                     double h = 1e-6) {
    check(h > 0.0, "finite_difference_grad: h must be positive");
    auto& xs = x.data();
    std::vector<double> g(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double orig = xs[i];
        xs[i] = orig + h;
        const double fp = f();
        xs[i] = orig - h;
        const double fm = f();
        xs[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            std::ostringstream os;
            os << "finite_difference_grad: non-finite value at index " << i << " (f(x+h)=" << fp
               << ", f(x-h)=" << fm << ")";
            throw std::runtime_error(os.str());
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor::from_data(x.shape(), std::move(g));
}

struct GradCheckComponent {
    std::string param;
    std::int64_t index = 0;
    double analytic = 0.0;
    double fd = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    GradCheckComponent worst;
    std::int64_t components_checked = 0;
    std::int64_t components_skipped = 0;  // unresolvable at the chosen h

    bool pass(double tol) const { return max_rel_err < tol; }
};

inline double gradcheck_rel_err(double analytic, double fd) {
    return std::abs(fd - analytic) / std::max(std::abs(analytic), 1e-8);
}

struct GradCheckOptions {
    double h = 1e-6;
    // 0 checks every component; otherwise the components with the largest
    // analytic gradients are checked per parameter (the best-conditioned
    // probes; a wrong gradient formula shows on them first).
    std::int64_t max_components_per_param = 0;
    // Components where both |analytic| and |fd| fall below this are skipped:
    // central differences at step h cannot resolve them against rounding
    // noise in the loss, so they carry no signal either way.
    double resolvability_floor = 1e-5;
};

/// Compares backward() gradients of `loss_fn` against central differences
/// for each named parameter. `loss_fn` must re-evaluate the loss from the
/// parameters' current data on every call.
inline GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn,
                                       const std::vector<std::pair<std::string, Tensor>>& params,
                                       const GradCheckOptions& opts = {}) {
    // Analytic pass.
    for (auto& [name, p] : params) {
        Tensor t = p;
        t.zero_grad();
    }
    {
        Tensor loss = loss_fn();
        check(std::isfinite(loss.item()), "check_gradients: loss is non-finite");
        loss.backward();
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        check(p.has_grad(), "check_gradients: no grad reached parameter " + name);
        analytic.push_back(p.grad());
    }

    auto eval = [&]() {
        NoGradGuard ng;
        return loss_fn().item();
    };

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi].second;
        const std::int64_t n = p.size();
        std::vector<std::int64_t> picks(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            picks[static_cast<std::size_t>(i)] = i;
        }
        if (opts.max_components_per_param > 0 && n > opts.max_components_per_param) {
            const auto& an = analytic[pi];
            std::partial_sort(picks.begin(),
                              picks.begin() + static_cast<std::ptrdiff_t>(
                                                  opts.max_components_per_param),
                              picks.end(), [&](std::int64_t a, std::int64_t b) {
                                  return std::abs(an[static_cast<std::size_t>(a)]) >
                                         std::abs(an[static_cast<std::size_t>(b)]);
                              });
            picks.resize(static_cast<std::size_t>(opts.max_components_per_param));
        }
        auto& xs = p.data();
        for (std::int64_t idx : picks) {
            const auto ui = static_cast<std::size_t>(idx);
            const double orig = xs[ui];
            xs[ui] = orig + opts.h;
            const double fp = eval();
            xs[ui] = orig - opts.h;
            const double fm = eval();
            xs[ui] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("check_gradients: non-finite loss at " +
                                         params[pi].first + "[" + std::to_string(idx) + "]");
            }
            const double fd = (fp - fm) / (2.0 * opts.h);
            const double an = analytic[pi][ui];
            if (std::abs(an) < opts.resolvability_floor &&
                std::abs(fd) < opts.resolvability_floor) {
                report.components_skipped++;
                continue;
            }
            const double err = gradcheck_rel_err(an, fd);
            report.components_checked++;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = {params[pi].first, idx, an, fd, err};
            }
        }
    }
    return report;
}

}  // namespace tante
