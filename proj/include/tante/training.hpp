#pragma once

// Loss assembly, AdamW, the warmup/decay learning-rate schedule, and the
// training loop. The loss soft-gates far-horizon targets by the predicted
// radius: w_t = sigmoid((r - t) / tau_s), so a model claiming a wide
// convergence interval is graded on the far targets it claims, while a
// narrow one escapes them and pays the radius regularizer instead. That
// gives the radius head a gradient path from prediction error, not just
// from the regularizer floor.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tante/checkpoint.hpp"
#include "tante/model.hpp"

namespace tante {

struct TrainConfig {
    std::int64_t iterations = 100000;
    std::int64_t warmup_steps = 5000;
    double peak_lr = 5e-5;
    double decay_rate = 0.9;
    std::int64_t decay_every = 5000;
    double weight_decay = 1e-5;
    std::int64_t batch_size = 4;
    std::int64_t K = 4;              // training prediction horizon
    double gate_temperature = 0.25;  // tau_s in the horizon gate
    double lambda_r = 1.0;
    double reg_eps = 0.5;
    double reg_m = 2.0;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 1000;

    void validate() const {
        check(iterations >= 0 && warmup_steps >= 0, "train config: negative counts");
        check(peak_lr > 0.0 && decay_rate > 0.0 && decay_rate <= 1.0,
              "train config: bad learning-rate parameters");
        check(decay_every >= 1 && batch_size >= 1 && K >= 1 && checkpoint_every >= 1,
              "train config: counts must be >= 1");
        check(gate_temperature > 0.0, "train config: gate temperature must be positive");
        check(lambda_r >= 0.0 && weight_decay >= 0.0,
              "train config: negative regularization");
    }
};

// Linear warmup from zero to peak_lr over warmup_steps, then a stepwise
// exponential decay applied once per decay_every thereafter.
inline double lr_schedule(const TrainConfig& c, std::int64_t step) {
    check(step >= 0, "lr_schedule: negative step");
    if (c.warmup_steps > 0 && step <= c.warmup_steps) {
        return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    }
    const std::int64_t k = (step - c.warmup_steps) / c.decay_every;
    return c.peak_lr * std::pow(c.decay_rate, static_cast<double>(k));
}

struct LossBreakdown {
    double total = 0.0;
    double mse = 0.0;          // gated data term as used in the loss
    double reg = 0.0;          // radius regularizer term (before lambda_r)
    double mean_radius = 1.0;  // 1.0 for fixed-step jets: their step is always one frame
};

// Gated multi-target loss for one sample. Targets is (K,H,W,D) at unit
// offsets 1..K past the newest input frame. Fixed-step jets (no radius
// head) reduce to the plain K-step average MSE.
inline Tensor training_loss(const TaylorJet& jet, const Tensor& targets,
                            const TrainConfig& cfg, LossBreakdown* parts = nullptr) {
    check(targets.rank() == 4 && targets.extent(0) == cfg.K,
          "training_loss: need exactly K target frames");

    std::vector<Tensor> weights;
    if (jet.has_radius()) {
        for (std::int64_t t = 1; t <= cfg.K; ++t) {
            Tensor shifted = add_scalar(jet.radius, -static_cast<double>(t));
            weights.push_back(sigmoid(mul_scalar(shifted, 1.0 / cfg.gate_temperature)));
        }
    } else {
        for (std::int64_t t = 1; t <= cfg.K; ++t) {
            weights.push_back(Tensor::scalar(1.0));
        }
    }

    Tensor num, den;
    for (std::int64_t t = 1; t <= cfg.K; ++t) {
        Tensor target = reshape(slice(targets, 0, t - 1, 1),
                                {targets.extent(1), targets.extent(2), targets.extent(3)});
        Tensor diff = sub(taylor_eval(jet, static_cast<double>(t)), target);
        Tensor mse_t = mean(mul(diff, diff));
        const Tensor& w = weights[static_cast<std::size_t>(t - 1)];
        num = num.defined() ? add(num, mul(w, mse_t)) : mul(w, mse_t);
        den = den.defined() ? add(den, w) : w;
    }
    Tensor data_term = div(num, den);

    Tensor total = data_term;
    double reg_val = 0.0;
    if (jet.has_radius()) {
        Tensor reg = regularization_loss(jet.radius, cfg.reg_eps, cfg.reg_m);
        reg_val = reg.item();
        total = add(total, mul_scalar(reg, cfg.lambda_r));
    }
    if (parts) {
        parts->total = total.item();
        parts->mse = data_term.item();
        parts->reg = reg_val;
        parts->mean_radius = jet.has_radius() ? jet.radius_value() : 1.0;
    }
    return total;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t t = 0;
};

// One decoupled-weight-decay Adam step over the model's parameter list.
// Decay is multiplicative on the parameter before the moment update is
// subtracted. Returns false (skipping the step and the moment update)
// if any gradient is non-finite.
inline bool adamw_step(std::vector<std::pair<std::string, Tensor>>& params, AdamWState& state,
                       double lr, double weight_decay, double beta1 = 0.9,
                       double beta2 = 0.999, double eps = 1e-8) {
    if (state.m.empty()) {
        for (auto& [name, p] : params) {
            state.m.emplace_back(p.data().size(), 0.0);
            state.v.emplace_back(p.data().size(), 0.0);
        }
    }
    check(state.m.size() == params.size(), "adamw: state does not match parameter list");

    for (auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
            if (!std::isfinite(g)) return false;
        }
    }

    state.t++;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        auto& m = state.m[i];
        auto& v = state.v[i];
        check(m.size() == p.data().size(), "adamw: parameter shape changed");
        const bool has_grad = p.has_grad();
        for (std::size_t j = 0; j < m.size(); ++j) {
            const double g = has_grad ? p.grad()[j] : 0.0;
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            double& w = p.data()[j];
            w *= 1.0 - lr * weight_decay;
            w -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    // One row per iteration: step, loss, mse, reg, lr, mean_radius.
    std::vector<std::array<double, 6>> curve;
    std::int64_t skipped_steps = 0;
    bool aborted_nan = false;
    std::string last_checkpoint;
};

namespace detail {

inline void write_loss_csv(const std::string& path, const TrainResult& r) {
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), "train: cannot open " + path);
    out << "step,loss,mse,reg,lr,mean_radius\n";
    char buf[192];
    for (const auto& row : r.curve) {
        std::snprintf(buf, sizeof(buf), "%lld,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                      static_cast<long long>(row[0]), row[1], row[2], row[3], row[4], row[5]);
        out << buf;
    }
    check(out.good(), "train: write failed for " + path);
}

}  // namespace detail

// Deterministic SGD loop: fixed seed fixes the batch sequence, every forward
// and reduction is sequential, so two runs produce bit-identical curves.
// A NaN loss aborts immediately; the last periodic checkpoint survives. The
// final checkpoint is written only on clean completion.
inline TrainResult train(TanteModel& model, const std::vector<Window>& windows,
                         const TrainConfig& cfg, const std::string& checkpoint_dir = "",
                         const std::string& loss_csv = "") {
    cfg.validate();
    check(!windows.empty(), "train: no training windows");
    for (const Window& w : windows) {
        check(w.targets.extent(0) >= cfg.K, "train: window horizon shorter than K");
    }
    if (!checkpoint_dir.empty()) {
        std::filesystem::create_directories(checkpoint_dir);
    }

    auto params = model.params();
    AdamWState opt;
    TrainResult result;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, windows.size() - 1);

    auto save_periodic = [&](std::int64_t step) {
        if (checkpoint_dir.empty()) return;
        char name[48];
        std::snprintf(name, sizeof(name), "ckpt_%06lld.bin", static_cast<long long>(step));
        const std::string path = checkpoint_dir + "/" + name;
        save_checkpoint(path, model, step);
        result.last_checkpoint = path;
    };

    for (std::int64_t step = 0; step < cfg.iterations; ++step) {
        for (auto& [name, p] : params) {
            p.zero_grad();
        }

        Tensor batch_loss;
        double mse_acc = 0.0, reg_acc = 0.0, radius_acc = 0.0;
        for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
            const Window& w = windows[pick(rng)];
            TaylorJet jet = model.forward(w.input);
            Tensor targets =
                w.targets.extent(0) == cfg.K ? w.targets : slice(w.targets, 0, 0, cfg.K);
            LossBreakdown parts;
            Tensor sample = training_loss(jet, targets, cfg, &parts);
            mse_acc += parts.mse;
            reg_acc += parts.reg;
            radius_acc += parts.mean_radius;
            batch_loss = batch_loss.defined() ? add(batch_loss, sample) : sample;
        }
        batch_loss = mul_scalar(batch_loss, 1.0 / static_cast<double>(cfg.batch_size));
        const double loss_val = batch_loss.item();
        const double lr = lr_schedule(cfg, step);
        result.curve.push_back({static_cast<double>(step), loss_val,
                                mse_acc / static_cast<double>(cfg.batch_size),
                                reg_acc / static_cast<double>(cfg.batch_size), lr,
                                radius_acc / static_cast<double>(cfg.batch_size)});

        if (!std::isfinite(loss_val)) {
            result.aborted_nan = true;
            break;
        }
        batch_loss.backward();
        if (!adamw_step(params, opt, lr, cfg.weight_decay)) {
            result.skipped_steps++;
        }

        if ((step + 1) % cfg.checkpoint_every == 0) {
            save_periodic(step + 1);
        }
    }

    if (!result.aborted_nan && !checkpoint_dir.empty()) {
        const std::string path = checkpoint_dir + "/ckpt_final.bin";
        save_checkpoint(path, model, cfg.iterations);
        result.last_checkpoint = path;
    }
    if (!loss_csv.empty()) {
        detail::write_loss_csv(loss_csv, result);
    }
    return result;
}

}  // namespace tante
