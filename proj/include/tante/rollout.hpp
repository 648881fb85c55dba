#pragma once

// Autoregressive rollout. The adaptive scheduler queries the model once per
// invocation, reads the radius of convergence, and evaluates the returned
// jet at every still-uncovered integer target inside the confidence
// interval; predicted frames are appended to the history and the input
// window slides forward. A fixed-step path (one unit step per invocation)
// serves the fixed-step model variant and cost baselines.

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tante/field.hpp"
#include "tante/model.hpp"

namespace tante {

/// One network invocation: absolute time of the jet's base frame, the
/// radius it reported, and the offsets (relative to tau) evaluated from it.
struct Invocation {
    double tau = 0.0;
    double radius = 0.0;
    std::vector<double> evaluated;
};

struct RolloutTrace {
    std::vector<Tensor> emitted;  // frames at integer offsets 1..T'
    std::vector<Invocation> invocations;

    std::int64_t calls() const { return static_cast<std::int64_t>(invocations.size()); }
};

/// Produces the Taylor jet for the given input window; `tau` is the
/// absolute time of the window's newest frame (model providers ignore it,
/// analytic oracles in tests need it).
using JetProvider = std::function<TaylorJet(const FieldSequence&, double tau)>;

inline JetProvider model_jet_provider(const TanteModel& model) {
    return [&model](const FieldSequence& window, double) {
        NoGradGuard ng;
        return model.forward(window);
    };
}

/// Last `T` frames of the timestamped history as a model input window,
/// timestamps recomputed as distances to the newest frame.
inline FieldSequence window_update(const std::vector<std::pair<double, Tensor>>& history,
                                   std::int64_t T) {
    check(static_cast<std::int64_t>(history.size()) >= T,
          "window_update: history holds " + std::to_string(history.size()) +
              " frames, need " + std::to_string(T));
    const std::size_t start = history.size() - static_cast<std::size_t>(T);
    const double newest = history.back().first;
    FieldSequence w;
    std::vector<Tensor> frames;
    frames.reserve(static_cast<std::size_t>(T));
    w.timestamps.reserve(static_cast<std::size_t>(T));
    for (std::size_t i = start; i < history.size(); ++i) {
        const Tensor& f = history[i].second;  // (H,W,D)
        frames.push_back(reshape(f, {1, f.extent(0), f.extent(1), f.extent(2)}));
        w.timestamps.push_back(newest - history[i].first);
    }
    w.frames = concat(frames, 0);
    return w;
}

namespace detail {

inline std::vector<std::pair<double, Tensor>> history_from_window(const FieldSequence& window) {
    window.validate();
    std::vector<std::pair<double, Tensor>> history;
    history.reserve(static_cast<std::size_t>(window.T()));
    for (std::int64_t i = 0; i < window.T(); ++i) {
        history.emplace_back(-window.timestamps[static_cast<std::size_t>(i)], window.frame(i));
    }
    for (std::size_t i = 1; i < history.size(); ++i) {
        check(history[i].first > history[i - 1].first,
              "rollout: window frames must be ordered oldest to newest");
    }
    return history;
}

}  // namespace detail

/// Greedy adaptive rollout to integer targets 1..steps (times relative to
/// the initial newest frame). Each invocation covers every uncovered target
/// within its radius; a radius smaller than the gap to the next target
/// (possible only when r_min < 1) triggers a fractional sub-step.
inline RolloutTrace adaptive_rollout(const JetProvider& provider, const FieldSequence& window,
                                     std::int64_t steps) {
    check(steps >= 1, "adaptive_rollout: steps must be >= 1");
    const std::int64_t T = window.T();
    auto history = detail::history_from_window(window);

    RolloutTrace trace;
    trace.emitted.resize(static_cast<std::size_t>(steps));
    std::int64_t next_target = 1;
    double tau = 0.0;
    // Progress per invocation is >= min(radius, 1) > 0; the cap only trips
    // on a broken provider.
    const std::int64_t max_calls = 64 * steps + 64;

    while (next_target <= steps) {
        check(trace.calls() < max_calls, "adaptive_rollout: invocation cap exceeded");
        FieldSequence current = window_update(history, T);
        TaylorJet jet = provider(current, tau);
        const double radius = jet.radius_value();
        check(radius > 0.0, "adaptive_rollout: provider reported a non-positive radius");

        Invocation inv;
        inv.tau = tau;
        inv.radius = radius;
        const double reach = tau + radius;
        if (static_cast<double>(next_target) > reach + 1e-12) {
            // Sub-step fallback: no target inside the confidence interval.
            Tensor frame = taylor_eval(jet, radius);
            inv.evaluated.push_back(radius);
            tau += radius;
            history.emplace_back(tau, std::move(frame));
        } else {
            while (next_target <= steps &&
                   static_cast<double>(next_target) <= reach + 1e-12) {
                // Clamp to the radius so a 1-ulp overshoot stays inside the
                // confidence interval.
                const double offset =
                    std::min(static_cast<double>(next_target) - tau, radius);
                Tensor frame = taylor_eval(jet, offset);
                trace.emitted[static_cast<std::size_t>(next_target - 1)] = frame;
                inv.evaluated.push_back(offset);
                history.emplace_back(static_cast<double>(next_target), std::move(frame));
                next_target++;
            }
            tau = history.back().first;
        }
        trace.invocations.push_back(std::move(inv));
    }
    return trace;
}

/// Fixed-step rollout: one invocation and one unit step per target. This is
/// the fixed-step variant's only mode and doubles as the constant-cost
/// baseline for adaptive models.
inline RolloutTrace fixed_rollout(const JetProvider& provider, const FieldSequence& window,
                                  std::int64_t steps) {
    check(steps >= 1, "fixed_rollout: steps must be >= 1");
    const std::int64_t T = window.T();
    auto history = detail::history_from_window(window);

    RolloutTrace trace;
    trace.emitted.resize(static_cast<std::size_t>(steps));
    for (std::int64_t t = 1; t <= steps; ++t) {
        FieldSequence current = window_update(history, T);
        TaylorJet jet = provider(current, static_cast<double>(t - 1));
        Tensor frame = taylor_eval(jet, 1.0);
        trace.emitted[static_cast<std::size_t>(t - 1)] = frame;
        trace.invocations.push_back(
            {static_cast<double>(t - 1), jet.has_radius() ? jet.radius_value() : 1.0, {1.0}});
        history.emplace_back(static_cast<double>(t), std::move(frame));
    }
    return trace;
}

/// CSV export: one row per invocation, evaluated offsets joined with ';'.
inline void write_trace_csv(const std::string& path, const RolloutTrace& trace) {
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), "trace export: cannot open " + path);
    out << "invocation,tau,radius,evaluated_offsets\n";
    for (std::size_t i = 0; i < trace.invocations.size(); ++i) {
        const Invocation& inv = trace.invocations[i];
        out << i << ',' << inv.tau << ',' << inv.radius << ',';
        for (std::size_t j = 0; j < inv.evaluated.size(); ++j) {
            out << (j ? ";" : "") << inv.evaluated[j];
        }
        out << '\n';
    }
    check(out.good(), "trace export: write failed for " + path);
}

}  // namespace tante
