// Command-line front end: data generation, training, evaluation, rollout,
// radius analysis, and gradient checking. Every subcommand reads a flat
// key=value config (file + --set overrides over built-in defaults) and
// writes a resolved snapshot beside its outputs, so any run can be rerun
// from its artifacts alone.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tante/checkpoint.hpp"
#include "tante/datasets.hpp"
#include "tante/gradcheck.hpp"
#include "tante/kvconfig.hpp"
#include "tante/metrics.hpp"
#include "tante/model.hpp"
#include "tante/rollout.hpp"
#include "tante/training.hpp"

namespace {

using namespace tante;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    std::string dataset;     // shorthand for --set dataset=...
    std::string checkpoint;  // shorthand for --set checkpoint=...
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required = true) {
    cmd->add_option("--config", args.config_path, "key=value config file");
    cmd->add_option("--set", args.sets, "override, e.g. --set iterations=500");
    auto* out = cmd->add_option("--out", args.out, "output directory");
    if (out_required) {
        out->required();
    }
}

// Defaults + file + flag shorthands + --set overrides, later wins. Throws on
// unknown keys or malformed lines; callers map that to a usage error.
void resolve(KvConfig& cfg, const CommonArgs& args) {
    if (!args.config_path.empty()) {
        cfg.load_file(args.config_path);
    }
    if (!args.dataset.empty()) {
        cfg.set("dataset", args.dataset);
    }
    if (!args.checkpoint.empty()) {
        cfg.set("checkpoint", args.checkpoint);
    }
    for (const std::string& kv : args.sets) {
        cfg.apply_override(kv);
    }
}

struct RunDirs {
    std::string root, checkpoints, metrics, traces;
};

RunDirs make_run_dirs(const std::string& root) {
    RunDirs d{root, root + "/checkpoints", root + "/metrics", root + "/traces"};
    std::filesystem::create_directories(d.checkpoints);
    std::filesystem::create_directories(d.metrics);
    std::filesystem::create_directories(d.traces);
    return d;
}

void declare_model_keys(KvConfig& c) {
    c.declare("order", "1");          // highest predicted derivative; 0 = fixed step
    c.declare("patch", "4");
    c.declare("embed_dim", "64");
    c.declare("mlp_dim", "64");
    c.declare("heads", "4");
    c.declare("blocks", "6");
    c.declare("r_max", "0");          // 0 resolves to twice the input length
    c.declare("input_frames", "4");
    c.declare("reg_eps", "0.5");
    c.declare("reg_m", "2");
}

ModelConfig model_from_kv(const KvConfig& c, std::int64_t D, std::int64_t H, std::int64_t W) {
    ModelConfig m;
    m.n = c.get_int("order");
    m.patch = c.get_int("patch");
    m.embed_dim = c.get_int("embed_dim");
    m.mlp_dim = c.get_int("mlp_dim");
    m.heads = c.get_int("heads");
    m.total_blocks = c.get_int("blocks");
    m.r_max = c.get_double("r_max");
    m.T = c.get_int("input_frames");
    m.reg_eps = c.get_double("reg_eps");
    m.reg_m = c.get_double("reg_m");
    m.D = D;
    m.H = H;
    m.W = W;
    m.validate();
    return m;
}

void declare_train_keys(KvConfig& c) {
    c.declare("dataset", "");
    c.declare("iterations", "2000");
    c.declare("warmup_steps", "200");
    c.declare("peak_lr", "1e-3");
    c.declare("decay_rate", "0.9");
    c.declare("decay_every", "5000");
    c.declare("weight_decay", "1e-5");
    c.declare("batch_size", "2");
    c.declare("horizon", "4");
    c.declare("gate_temperature", "0.25");
    c.declare("lambda_r", "1");
    c.declare("seed", "0");
    c.declare("model_seed", "0");
    c.declare("checkpoint_every", "500");
    c.declare("window_stride", "1");
}

TrainConfig train_from_kv(const KvConfig& c) {
    TrainConfig t;
    t.iterations = c.get_int("iterations");
    t.warmup_steps = c.get_int("warmup_steps");
    t.peak_lr = c.get_double("peak_lr");
    t.decay_rate = c.get_double("decay_rate");
    t.decay_every = c.get_int("decay_every");
    t.weight_decay = c.get_double("weight_decay");
    t.batch_size = c.get_int("batch_size");
    t.K = c.get_int("horizon");
    t.gate_temperature = c.get_double("gate_temperature");
    t.lambda_r = c.get_double("lambda_r");
    t.reg_eps = c.get_double("reg_eps");
    t.reg_m = c.get_double("reg_m");
    t.seed = c.get_u64("seed");
    t.checkpoint_every = c.get_int("checkpoint_every");
    t.validate();
    return t;
}

std::vector<Tensor> load_split(const std::string& dir, const DatasetManifest& m,
                               const std::vector<std::int64_t>& indices) {
    std::vector<Tensor> out;
    for (std::int64_t i : indices) {
        out.push_back(load_trajectory(dir, m, i));
    }
    return out;
}

double sample_std(const std::vector<double>& xs, double mean) {
    if (xs.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : xs) {
        acc += (x - mean) * (x - mean);
    }
    return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

double mean_of(const std::vector<double>& xs) {
    double acc = 0.0;
    for (double x : xs) acc += x;
    return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------

int cmd_generate(const CommonArgs& args) {
    KvConfig c;
    c.declare("kind", "heat2d");
    c.declare("trajectories", "200");
    c.declare("frames", "24");
    c.declare("grid_h", "32");
    c.declare("grid_w", "32");
    c.declare("channels", "1");
    c.declare("dt", "1");
    c.declare("kappas", "0.01");
    c.declare("cx", "0.5");
    c.declare("cy", "0.25");
    c.declare("max_mode", "4");
    c.declare("n_modes", "6");
    c.declare("seed", "0");
    try {
        resolve(c, args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        GenerateConfig g;
        g.kind = c.get("kind");
        g.trajectories = c.get_int("trajectories");
        g.frames = c.get_int("frames");
        g.H = c.get_int("grid_h");
        g.W = c.get_int("grid_w");
        g.D = c.get_int("channels");
        g.dt = c.get_double("dt");
        g.kappas = c.get_doubles("kappas");
        g.cx = c.get_double("cx");
        g.cy = c.get_double("cy");
        g.max_mode = c.get_int("max_mode");
        g.n_modes = c.get_int("n_modes");
        g.seed = c.get_u64("seed");

        DatasetManifest m = generate_dataset(args.out, g);
        c.write_snapshot(args.out + "/config.txt");
        std::printf("wrote %lld trajectories (%lld train / %lld val / %lld test) to %s\n",
                    static_cast<long long>(m.trajectories),
                    static_cast<long long>(m.train.size()),
                    static_cast<long long>(m.val.size()),
                    static_cast<long long>(m.test.size()), args.out.c_str());
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_train(const CommonArgs& args) {
    KvConfig c;
    declare_model_keys(c);
    declare_train_keys(c);
    try {
        resolve(c, args);
        check(!c.get("dataset").empty(), "config: dataset is required");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        const std::string dataset = c.get("dataset");
        DatasetManifest manifest = read_manifest(dataset);
        RunDirs dirs = make_run_dirs(args.out);
        c.write_snapshot(dirs.root + "/config.txt");

        ModelConfig mc = model_from_kv(c, manifest.D, manifest.H, manifest.W);
        TrainConfig tc = train_from_kv(c);

        std::vector<Tensor> trajs = load_split(dataset, manifest, manifest.train);
        for (Tensor& t : trajs) {
            t = normalize(t, manifest.stats);
        }
        WindowSet ws = make_windows(trajs, mc.T, tc.K, c.get_int("window_stride"));
        check(!ws.windows.empty(), "train: no usable windows in the train split");
        if (ws.skipped > 0) {
            std::printf("skipped %lld trajectories shorter than %lld frames\n",
                        static_cast<long long>(ws.skipped),
                        static_cast<long long>(mc.T + tc.K));
        }
        std::printf("training on %zu windows from %zu trajectories\n", ws.windows.size(),
                    trajs.size());

        TanteModel model(mc, c.get_u64("model_seed"));
        std::printf("model: order %lld, %lld blocks, %lld parameters\n",
                    static_cast<long long>(mc.n), static_cast<long long>(mc.total_blocks),
                    static_cast<long long>(model.param_count()));

        TrainResult r = train(model, ws.windows, tc, dirs.checkpoints,
                              dirs.metrics + "/loss.csv");
        if (r.skipped_steps > 0) {
            std::printf("skipped %lld optimizer steps on non-finite gradients\n",
                        static_cast<long long>(r.skipped_steps));
        }
        if (r.aborted_nan) {
            std::cerr << "error: loss went non-finite at step "
                      << (r.curve.empty() ? 0.0 : r.curve.back()[0])
                      << "; last checkpoint: "
                      << (r.last_checkpoint.empty() ? "(none)" : r.last_checkpoint) << "\n";
            return 2;
        }
        std::printf("final checkpoint: %s\n", r.last_checkpoint.c_str());
        if (!r.curve.empty()) {
            std::printf("loss: first %.6g last %.6g\n", r.curve.front()[1], r.curve.back()[1]);
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

struct EvalAccumulator {
    std::vector<double> mse_vals, rel_vals, calls_vals, wall_vals;
    std::vector<std::vector<double>> step_curves;
    std::vector<double> radii;
    std::vector<std::vector<double>> per_channel;
};

int cmd_evaluate(const CommonArgs& args) {
    KvConfig c;
    c.declare("dataset", "");
    c.declare("checkpoint", "");
    c.declare("horizons", "4,8");
    c.declare("split", "test");
    try {
        resolve(c, args);
        check(!c.get("dataset").empty(), "config: dataset is required");
        check(!c.get("checkpoint").empty(), "config: checkpoint is required");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        const std::string dataset = c.get("dataset");
        DatasetManifest manifest = read_manifest(dataset);
        TanteModel model = load_model(c.get("checkpoint"));
        const ModelConfig& mc = model.cfg;
        check(mc.D == manifest.D && mc.H == manifest.H && mc.W == manifest.W,
              "evaluate: checkpoint grid does not match dataset");

        RunDirs dirs = make_run_dirs(args.out);
        c.write_snapshot(dirs.root + "/config.txt");

        const std::string split = c.get("split");
        const std::vector<std::int64_t>& idx =
            split == "train" ? manifest.train : split == "val" ? manifest.val : manifest.test;
        check(!idx.empty(), "evaluate: split '" + split + "' is empty");

        std::vector<std::int64_t> horizons;
        for (double h : c.get_doubles("horizons")) {
            horizons.push_back(static_cast<std::int64_t>(h));
        }

        for (std::int64_t horizon : horizons) {
            check(manifest.frames >= mc.T + horizon,
                  "evaluate: trajectories too short for horizon " +
                      std::to_string(horizon));
            EvalAccumulator acc;
            for (std::int64_t i : idx) {
                Tensor traj = load_trajectory(dataset, manifest, i);
                FieldSequence input;
                input.frames = normalize(slice(traj, 0, 0, mc.T), manifest.stats);
                input.timestamps = unit_timestamps(mc.T);
                Tensor truth = slice(traj, 0, mc.T, horizon).detach();

                const auto t0 = std::chrono::steady_clock::now();
                RolloutTrace trace =
                    mc.adaptive()
                        ? adaptive_rollout(model_jet_provider(model), input, horizon)
                        : fixed_rollout(model_jet_provider(model), input, horizon);
                const auto t1 = std::chrono::steady_clock::now();

                std::vector<Tensor> frames;
                for (const Tensor& f : trace.emitted) {
                    frames.push_back(reshape(f, {1, mc.H, mc.W, mc.D}));
                }
                Tensor pred = denormalize(concat(frames, 0), manifest.stats);

                acc.mse_vals.push_back(mse(pred, truth));
                RelL2Result rr = rel_l2_detailed(pred, truth);
                acc.rel_vals.push_back(rr.aggregate);
                acc.per_channel.push_back(rr.per_channel);
                acc.step_curves.push_back(error_accumulation(pred, truth));
                acc.calls_vals.push_back(static_cast<double>(trace.calls()));
                acc.wall_vals.push_back(
                    std::chrono::duration<double>(t1 - t0).count());
                for (const Invocation& inv : trace.invocations) {
                    acc.radii.push_back(inv.radius);
                }
            }

            // Per-step mean and sample std across trajectories.
            std::vector<double> step_mean(static_cast<std::size_t>(horizon), 0.0);
            std::vector<double> step_std(static_cast<std::size_t>(horizon), 0.0);
            for (std::int64_t s = 0; s < horizon; ++s) {
                std::vector<double> col;
                for (const auto& curve : acc.step_curves) {
                    col.push_back(curve[static_cast<std::size_t>(s)]);
                }
                step_mean[static_cast<std::size_t>(s)] = mean_of(col);
                step_std[static_cast<std::size_t>(s)] =
                    sample_std(col, step_mean[static_cast<std::size_t>(s)]);
            }
            std::vector<double> chan_mean(static_cast<std::size_t>(mc.D), 0.0);
            for (std::int64_t d = 0; d < mc.D; ++d) {
                std::vector<double> col;
                for (const auto& pc : acc.per_channel) {
                    col.push_back(pc[static_cast<std::size_t>(d)]);
                }
                chan_mean[static_cast<std::size_t>(d)] = mean_of(col);
            }

            const double mse_mean = mean_of(acc.mse_vals);
            const double rel_mean = mean_of(acc.rel_vals);
            nlohmann::json j{
                {"horizon", horizon},
                {"split", split},
                {"trajectories", idx.size()},
                {"mse", {{"mean", mse_mean}, {"std", sample_std(acc.mse_vals, mse_mean)}}},
                {"rel_l2",
                 {{"mean", rel_mean}, {"std", sample_std(acc.rel_vals, rel_mean)}}},
                {"per_channel_rel_l2", chan_mean},
                {"per_step_rel_l2", step_mean},
                {"calls", {{"mean", mean_of(acc.calls_vals)}, {"fixed_step", horizon}}},
                {"mean_radius", acc.radii.empty() ? 1.0 : mean_of(acc.radii)},
                {"wall_seconds_per_trajectory", mean_of(acc.wall_vals)}};
            {
                const std::string name =
                    dirs.metrics + "/eval_T" + std::to_string(horizon) + ".json";
                std::ofstream out(name, std::ios::trunc);
                check(out.good(), "evaluate: cannot open " + name);
                out << j.dump(2) << '\n';
            }
            {
                const std::string name =
                    dirs.metrics + "/eval_T" + std::to_string(horizon) + "_steps.csv";
                std::ofstream out(name, std::ios::trunc);
                check(out.good(), "evaluate: cannot open " + name);
                out << "step,rel_l2_mean,rel_l2_std\n";
                char buf[96];
                for (std::int64_t s = 0; s < horizon; ++s) {
                    std::snprintf(buf, sizeof(buf), "%lld,%.12g,%.12g\n",
                                  static_cast<long long>(s + 1),
                                  step_mean[static_cast<std::size_t>(s)],
                                  step_std[static_cast<std::size_t>(s)]);
                    out << buf;
                }
            }
            std::printf(
                "T'=%lld: rel_l2 %.4f, mse %.6g, calls/traj %.2f (fixed %lld), "
                "%.3fs/traj\n",
                static_cast<long long>(horizon), rel_mean, mse_mean,
                mean_of(acc.calls_vals), static_cast<long long>(horizon),
                mean_of(acc.wall_vals));
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_rollout(const CommonArgs& args) {
    KvConfig c;
    c.declare("dataset", "");
    c.declare("checkpoint", "");
    c.declare("trajectory", "0");
    c.declare("steps", "8");
    c.declare("mode", "adaptive");
    try {
        resolve(c, args);
        check(!c.get("dataset").empty(), "config: dataset is required");
        check(!c.get("checkpoint").empty(), "config: checkpoint is required");
        const std::string mode = c.get("mode");
        check(mode == "adaptive" || mode == "fixed", "config: mode must be adaptive|fixed");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        const std::string dataset = c.get("dataset");
        DatasetManifest manifest = read_manifest(dataset);
        TanteModel model = load_model(c.get("checkpoint"));
        const ModelConfig& mc = model.cfg;
        const std::int64_t steps = c.get_int("steps");
        const bool adaptive = c.get("mode") == "adaptive";
        check(!adaptive || mc.adaptive(),
              "rollout: fixed-step checkpoints have no radius head; use mode=fixed");
        check(mc.D == manifest.D && mc.H == manifest.H && mc.W == manifest.W,
              "rollout: checkpoint grid does not match dataset");

        RunDirs dirs = make_run_dirs(args.out);
        c.write_snapshot(dirs.root + "/config.txt");

        Tensor traj = load_trajectory(dataset, manifest, c.get_int("trajectory"));
        FieldSequence input;
        input.frames = normalize(slice(traj, 0, 0, mc.T), manifest.stats);
        input.timestamps = unit_timestamps(mc.T);

        RolloutTrace trace = adaptive
                                 ? adaptive_rollout(model_jet_provider(model), input, steps)
                                 : fixed_rollout(model_jet_provider(model), input, steps);
        std::vector<Tensor> frames;
        for (const Tensor& f : trace.emitted) {
            frames.push_back(reshape(f, {1, mc.H, mc.W, mc.D}));
        }
        Tensor pred = denormalize(concat(frames, 0), manifest.stats);

        write_trace_csv(dirs.traces + "/trace.csv", trace);
        write_field_file(dirs.traces + "/predictions.bin", pred);
        std::printf("emitted %lld frames in %lld model calls; trace: %s\n",
                    static_cast<long long>(steps), static_cast<long long>(trace.calls()),
                    (dirs.traces + "/trace.csv").c_str());
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_analyze_radius(const CommonArgs& args) {
    KvConfig c;
    c.declare("dataset", "");
    c.declare("checkpoint", "");
    c.declare("steps", "8");
    c.declare("split", "test");
    c.declare("group_by", "regime");  // regime | step
    try {
        resolve(c, args);
        check(!c.get("dataset").empty(), "config: dataset is required");
        check(!c.get("checkpoint").empty(), "config: checkpoint is required");
        const std::string g = c.get("group_by");
        check(g == "regime" || g == "step", "config: group_by must be regime|step");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        const std::string dataset = c.get("dataset");
        DatasetManifest manifest = read_manifest(dataset);
        TanteModel model = load_model(c.get("checkpoint"));
        const ModelConfig& mc = model.cfg;
        check(mc.adaptive(), "analyze-radius: checkpoint has no radius head");
        const char* param_label = manifest.generator == "heat2d" ? "kappa=" : "param=";

        RunDirs dirs = make_run_dirs(args.out);
        c.write_snapshot(dirs.root + "/config.txt");

        const std::string split = c.get("split");
        const std::vector<std::int64_t>& idx =
            split == "train" ? manifest.train : split == "val" ? manifest.val : manifest.test;
        check(!idx.empty(), "analyze-radius: split '" + split + "' is empty");
        const std::int64_t steps = c.get_int("steps");
        const bool by_regime = c.get("group_by") == "regime";

        // Ordered group keys: regimes sorted ascending, steps by time bucket.
        std::map<double, std::vector<double>> buckets;
        for (std::int64_t i : idx) {
            Tensor traj = load_trajectory(dataset, manifest, i);
            FieldSequence input;
            input.frames = normalize(slice(traj, 0, 0, mc.T), manifest.stats);
            input.timestamps = unit_timestamps(mc.T);
            RolloutTrace trace = adaptive_rollout(model_jet_provider(model), input, steps);
            for (const Invocation& inv : trace.invocations) {
                const double key =
                    by_regime ? (manifest.traj_param.empty()
                                     ? 0.0
                                     : manifest.traj_param[static_cast<std::size_t>(i)])
                              : std::floor(inv.tau);
                buckets[key].push_back(inv.radius);
            }
        }

        std::vector<std::pair<std::string, std::vector<double>>> groups;
        for (auto& [key, samples] : buckets) {
            char label[48];
            std::snprintf(label, sizeof(label), "%s%g", by_regime ? param_label : "tau=",
                          key);
            groups.emplace_back(label, std::move(samples));
        }
        RadiusReport rep = radius_report(groups);
        write_radius_csv(dirs.metrics + "/radius_report.csv", rep);
        {
            std::ofstream out(dirs.metrics + "/radius_samples.csv", std::ios::trunc);
            check(out.good(), "analyze-radius: cannot open samples csv");
            out << "group,radius\n";
            char buf[96];
            for (const auto& [name, samples] : groups) {
                for (double r : samples) {
                    std::snprintf(buf, sizeof(buf), "%s,%.12g\n", name.c_str(), r);
                    out << buf;
                }
            }
        }

        for (const GroupSummary& g : rep.groups) {
            std::printf("%-14s n=%-5lld q1=%.3f median=%.3f q3=%.3f\n", g.name.c_str(),
                        static_cast<long long>(g.count), g.q1, g.median, g.q3);
        }
        for (const PairTest& t : rep.tests) {
            std::printf("%s vs %s: U=%g p=%.4g %s\n", t.a.c_str(), t.b.c_str(), t.U, t.p,
                        t.stars.c_str());
        }
        for (const std::string& name : rep.excluded) {
            std::printf("%s: fewer than 2 samples, excluded\n", name.c_str());
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_gradcheck(const CommonArgs& args) {
    KvConfig c;
    declare_model_keys(c);
    c.declare("seed", "0");
    c.declare("samples", "3");  // FD probes per parameter
    c.declare("tolerance", "1e-4");
    c.declare("grid", "8");
    c.declare("channels", "1");
    // The built-in dims make a deliberately small model; override to stress
    // larger shapes.
    c.set("order", "2");
    c.set("embed_dim", "32");
    c.set("mlp_dim", "32");
    c.set("blocks", "3");
    c.set("patch", "2");
    try {
        resolve(c, args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        const std::int64_t grid = c.get_int("grid");
        ModelConfig mc = model_from_kv(c, c.get_int("channels"), grid, grid);
        TanteModel model(mc, c.get_u64("seed"));
        // Zero-initialized heads give zero gradients that finite differences
        // cannot resolve; perturb everything to probe real signal.
        std::mt19937_64 rng(splitmix64(c.get_u64("seed") + 1));
        std::uniform_real_distribution<double> dist(-0.2, 0.2);
        for (auto& [name, p] : model.params()) {
            for (auto& v : p.data()) {
                v = dist(rng);
            }
        }

        FieldSequence input;
        input.frames = Tensor::randn({mc.T, mc.H, mc.W, mc.D}, rng, 0.5);
        input.timestamps = unit_timestamps(mc.T);
        TrainConfig tc;
        tc.K = 2;
        Tensor targets = Tensor::randn({tc.K, mc.H, mc.W, mc.D}, rng, 0.5);
        auto loss_fn = [&]() { return training_loss(model.forward(input), targets, tc); };

        GradCheckOptions opt;
        opt.max_components_per_param = c.get_int("samples");
        const double tol = c.get_double("tolerance");

        // One row per parameter group (prefix before the first dot).
        auto params = model.params();
        std::map<std::string, std::vector<std::pair<std::string, Tensor>>> by_group;
        std::vector<std::string> group_order;
        for (auto& [name, p] : params) {
            const std::string group = name.substr(0, name.find('.'));
            if (by_group.find(group) == by_group.end()) {
                group_order.push_back(group);
            }
            by_group[group].emplace_back(name, p);
        }

        std::printf("%-12s %10s %8s %12s  %s\n", "group", "checked", "skipped",
                    "max_rel_err", "worst");
        double overall = 0.0;
        for (const std::string& group : group_order) {
            GradCheckReport rep = check_gradients(loss_fn, by_group[group], opt);
            overall = std::max(overall, rep.max_rel_err);
            std::printf("%-12s %10lld %8lld %12.3e  %s[%lld]\n", group.c_str(),
                        static_cast<long long>(rep.components_checked),
                        static_cast<long long>(rep.components_skipped), rep.max_rel_err,
                        rep.worst.param.c_str(), static_cast<long long>(rep.worst.index));
        }
        std::printf("overall max relative error: %.3e (tolerance %g)\n", overall, tol);
        if (!(overall < tol)) {
            std::cerr << "error: gradient check failed\n";
            return 2;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"time-adaptive neural PDE forecaster"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, roll_args, radius_args, grad_args;

    auto* gen = app.add_subcommand("generate-data", "write a synthetic trajectory dataset");
    add_common(gen, gen_args);
    auto* train = app.add_subcommand("train", "train a model on a dataset");
    add_common(train, train_args);
    train->add_option("--dataset", train_args.dataset, "dataset directory");
    auto* eval = app.add_subcommand("evaluate", "metric reports for a checkpoint");
    add_common(eval, eval_args);
    eval->add_option("--dataset", eval_args.dataset, "dataset directory");
    eval->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file");
    auto* roll = app.add_subcommand("rollout", "export one trajectory's rollout trace");
    add_common(roll, roll_args);
    roll->add_option("--dataset", roll_args.dataset, "dataset directory");
    roll->add_option("--checkpoint", roll_args.checkpoint, "checkpoint file");
    auto* radius = app.add_subcommand("analyze-radius", "radius distributions and rank tests");
    add_common(radius, radius_args);
    radius->add_option("--dataset", radius_args.dataset, "dataset directory");
    radius->add_option("--checkpoint", radius_args.checkpoint, "checkpoint file");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common(grad, grad_args, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (gen->parsed()) return cmd_generate(gen_args);
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) return cmd_evaluate(eval_args);
    if (roll->parsed()) return cmd_rollout(roll_args);
    if (radius->parsed()) return cmd_analyze_radius(radius_args);
    if (grad->parsed()) return cmd_gradcheck(grad_args);
    return 1;
}
