#pragma once

// Synthetic periodic-domain trajectories with closed-form evolution, plus the
// on-disk dataset format: one raw float32 file per trajectory and a JSON
// manifest carrying shapes, splits, and train-split normalization stats.
//
// Both generators evolve a superposition of Fourier modes on [0,1)^2, so
// every frame is an exact analytic evaluation rather than a solver output:
//   heat        each mode decays by exp(-kappa (2pi)^2 |k|^2 t)
//   advection   each mode picks up the phase shift of u0(x - c t)

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tante/field.hpp"
#include "tante/tensor.hpp"

namespace tante {

static_assert(std::endian::native == std::endian::little,
              "dataset format assumes a little-endian host");

struct ModeSpec {
    std::int64_t kx = 0;
    std::int64_t ky = 0;
    double amp_cos = 0.0;
    double amp_sin = 0.0;
};

namespace detail {

// Adds a*cos(theta) + b*sin(theta) over the grid, theta = 2pi(kx*x + ky*y),
// sampled at x = col/W, y = row/H.
inline void accumulate_mode(std::vector<double>& grid, std::int64_t H, std::int64_t W,
                            const ModeSpec& m, double a, double b) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    for (std::int64_t i = 0; i < H; ++i) {
        const double py = two_pi * static_cast<double>(m.ky) * static_cast<double>(i) /
                          static_cast<double>(H);
        for (std::int64_t j = 0; j < W; ++j) {
            const double theta = two_pi * static_cast<double>(m.kx) * static_cast<double>(j) /
                                     static_cast<double>(W) +
                                 py;
            grid[static_cast<std::size_t>(i * W + j)] +=
                a * std::cos(theta) + b * std::sin(theta);
        }
    }
}

}  // namespace detail

// Frames (frames,H,W,D) of the heat equation started from the given modes.
// Channel d uses channel_modes[d]; all channels share the diffusivity.
inline Tensor heat2d_from_modes(const std::vector<std::vector<ModeSpec>>& channel_modes,
                                std::int64_t H, std::int64_t W, std::int64_t frames,
                                double dt, double kappa) {
    check(kappa >= 0.0, "heat2d: negative diffusivity blows up");
    check(H >= 1 && W >= 1 && frames >= 1 && !channel_modes.empty(),
          "heat2d: empty grid or mode list");
    const std::int64_t D = static_cast<std::int64_t>(channel_modes.size());
    Tensor out = Tensor::zeros({frames, H, W, D});
    constexpr double four_pi2 = 39.478417604357434475337963999505;
    std::vector<double> grid;
    for (std::int64_t f = 0; f < frames; ++f) {
        const double t = dt * static_cast<double>(f);
        for (std::int64_t d = 0; d < D; ++d) {
            grid.assign(static_cast<std::size_t>(H * W), 0.0);
            for (const ModeSpec& m : channel_modes[static_cast<std::size_t>(d)]) {
                const double k2 = static_cast<double>(m.kx * m.kx + m.ky * m.ky);
                const double decay = std::exp(-kappa * four_pi2 * k2 * t);
                detail::accumulate_mode(grid, H, W, m, m.amp_cos * decay, m.amp_sin * decay);
            }
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    out.data()[static_cast<std::size_t>(((f * H + i) * W + j) * D + d)] =
                        grid[static_cast<std::size_t>(i * W + j)];
                }
            }
        }
    }
    return out;
}

// Frames of pure advection u(x,t) = u0(x - c t), evaluated spectrally: the
// translated field keeps each mode's amplitude and rotates its phase.
inline Tensor advection2d_from_modes(const std::vector<std::vector<ModeSpec>>& channel_modes,
                                     std::int64_t H, std::int64_t W, std::int64_t frames,
                                     double dt, double cx, double cy) {
    check(H >= 1 && W >= 1 && frames >= 1 && !channel_modes.empty(),
          "advection2d: empty grid or mode list");
    const std::int64_t D = static_cast<std::int64_t>(channel_modes.size());
    Tensor out = Tensor::zeros({frames, H, W, D});
    constexpr double two_pi = 6.283185307179586476925286766559;
    std::vector<double> grid;
    for (std::int64_t f = 0; f < frames; ++f) {
        const double t = dt * static_cast<double>(f);
        for (std::int64_t d = 0; d < D; ++d) {
            grid.assign(static_cast<std::size_t>(H * W), 0.0);
            for (const ModeSpec& m : channel_modes[static_cast<std::size_t>(d)]) {
                // cos(theta - phi), sin(theta - phi) expanded onto the static basis.
                const double phi =
                    two_pi * (static_cast<double>(m.kx) * cx + static_cast<double>(m.ky) * cy) *
                    t;
                const double c = std::cos(phi), s = std::sin(phi);
                detail::accumulate_mode(grid, H, W, m, m.amp_cos * c - m.amp_sin * s,
                                        m.amp_cos * s + m.amp_sin * c);
            }
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    out.data()[static_cast<std::size_t>(((f * H + i) * W + j) * D + d)] =
                        grid[static_cast<std::size_t>(i * W + j)];
                }
            }
        }
    }
    return out;
}

// A DC offset plus n_modes canonical-half-plane modes (kx > 0, or kx == 0 and
// ky > 0, so no sampled pair aliases another). Amplitudes shrink with |k| to
// keep the fields smooth.
inline std::vector<ModeSpec> random_modes(std::mt19937_64& rng, std::int64_t max_mode,
                                          std::int64_t n_modes) {
    check(max_mode >= 1 && n_modes >= 1, "random_modes: need max_mode, n_modes >= 1");
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<std::int64_t> kx_dist(0, max_mode);
    std::uniform_int_distribution<std::int64_t> ky_dist(-max_mode, max_mode);
    std::vector<ModeSpec> modes;
    modes.push_back({0, 0, 0.5 * gauss(rng), 0.0});
    while (static_cast<std::int64_t>(modes.size()) < n_modes + 1) {
        ModeSpec m;
        m.kx = kx_dist(rng);
        m.ky = ky_dist(rng);
        if (m.kx < 0 || (m.kx == 0 && m.ky <= 0)) {
            continue;
        }
        const double scale = 1.0 / (1.0 + static_cast<double>(m.kx * m.kx + m.ky * m.ky));
        m.amp_cos = scale * gauss(rng);
        m.amp_sin = scale * gauss(rng);
        modes.push_back(m);
    }
    return modes;
}

// ---------------------------------------------------------------------------
// On-disk format

inline void write_field_file(const std::string& path, const Tensor& t) {
    std::vector<float> blob(t.data().size());
    for (std::size_t i = 0; i < blob.size(); ++i) {
        blob[i] = static_cast<float>(t.data()[i]);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "dataset: cannot open " + path);
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
    check(out.good(), "dataset: write failed for " + path);
}

inline Tensor read_field_file(const std::string& path, std::int64_t T, std::int64_t H,
                              std::int64_t W, std::int64_t D) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "dataset: cannot open " + path);
    const std::size_t count = static_cast<std::size_t>(T * H * W * D);
    std::vector<float> blob(count);
    in.read(reinterpret_cast<char*>(blob.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    check(in.gcount() == static_cast<std::streamsize>(count * sizeof(float)),
          "dataset: short read from " + path);
    in.peek();
    check(in.eof(), "dataset: trailing bytes in " + path);
    Tensor t = Tensor::zeros({T, H, W, D});
    for (std::size_t i = 0; i < count; ++i) {
        t.data()[i] = static_cast<double>(blob[i]);
    }
    return t;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

enum class Split { train, val, test };

// Stateless per-trajectory split so generation order never matters.
inline Split split_of(std::uint64_t seed, std::int64_t index) {
    const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index)));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    if (u < 0.8) return Split::train;
    if (u < 0.9) return Split::val;
    return Split::test;
}

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stdev;
};

struct DatasetManifest {
    std::string generator;
    std::int64_t trajectories = 0;
    std::int64_t frames = 0;
    std::int64_t H = 0;
    std::int64_t W = 0;
    std::int64_t D = 0;
    double dt = 1.0;
    std::vector<std::string> channel_names;
    ChannelStats stats;              // from the train split only
    std::vector<std::int64_t> train;
    std::vector<std::int64_t> val;
    std::vector<std::int64_t> test;
    std::vector<double> traj_param;  // per-trajectory regime value (heat diffusivity)
    nlohmann::json params;           // generator config echo
};

inline std::string trajectory_filename(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "traj_%05lld.bin", static_cast<long long>(index));
    return buf;
}

inline void write_manifest(const std::string& dir, const DatasetManifest& m) {
    nlohmann::json j{{"format", "tante-dataset-v1"},
                     {"generator", m.generator},
                     {"trajectories", m.trajectories},
                     {"frames", m.frames},
                     {"H", m.H},
                     {"W", m.W},
                     {"D", m.D},
                     {"dt", m.dt},
                     {"channel_names", m.channel_names},
                     {"stats", {{"mean", m.stats.mean}, {"std", m.stats.stdev}}},
                     {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}},
                     {"traj_param", m.traj_param},
                     {"params", m.params}};
    std::ofstream out(dir + "/manifest.json", std::ios::trunc);
    check(out.good(), "dataset: cannot open manifest in " + dir);
    out << j.dump(2) << '\n';
    check(out.good(), "dataset: manifest write failed in " + dir);
}

inline DatasetManifest read_manifest(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    check(in.good(), "dataset: no manifest in " + dir);
    nlohmann::json j = nlohmann::json::parse(in);
    check(j.at("format") == "tante-dataset-v1", "dataset: unknown manifest format");
    DatasetManifest m;
    m.generator = j.at("generator");
    m.trajectories = j.at("trajectories");
    m.frames = j.at("frames");
    m.H = j.at("H");
    m.W = j.at("W");
    m.D = j.at("D");
    m.dt = j.at("dt");
    m.channel_names = j.at("channel_names").get<std::vector<std::string>>();
    m.stats.mean = j.at("stats").at("mean").get<std::vector<double>>();
    m.stats.stdev = j.at("stats").at("std").get<std::vector<double>>();
    m.train = j.at("splits").at("train").get<std::vector<std::int64_t>>();
    m.val = j.at("splits").at("val").get<std::vector<std::int64_t>>();
    m.test = j.at("splits").at("test").get<std::vector<std::int64_t>>();
    m.traj_param = j.at("traj_param").get<std::vector<double>>();
    m.params = j.at("params");
    return m;
}

inline Tensor load_trajectory(const std::string& dir, const DatasetManifest& m,
                              std::int64_t index) {
    check(index >= 0 && index < m.trajectories, "dataset: trajectory index out of range");
    return read_field_file(dir + "/" + trajectory_filename(index), m.frames, m.H, m.W, m.D);
}

// ---------------------------------------------------------------------------
// Generation

struct GenerateConfig {
    std::string kind = "heat2d";  // heat2d | advection2d
    std::int64_t trajectories = 200;
    std::int64_t frames = 24;
    std::int64_t H = 32;
    std::int64_t W = 32;
    std::int64_t D = 1;
    double dt = 1.0;
    std::vector<double> kappas = {0.01};  // heat2d: trajectory i uses kappas[i % size()]
    double cx = 0.5;                      // advection2d drift per time unit
    double cy = 0.25;
    std::int64_t max_mode = 4;
    std::int64_t n_modes = 6;
    std::uint64_t seed = 0;
};

// Writes trajectory files plus the manifest; returns the manifest. Every
// trajectory derives its RNG stream from (seed, index) alone, and the split
// is a pure hash, so regeneration of any subset is reproducible.
inline DatasetManifest generate_dataset(const std::string& dir, const GenerateConfig& cfg) {
    check(cfg.kind == "heat2d" || cfg.kind == "advection2d",
          "generate_dataset: unknown kind " + cfg.kind);
    check(cfg.trajectories >= 1 && cfg.frames >= 1, "generate_dataset: empty dataset");
    if (cfg.kind == "heat2d") {
        check(!cfg.kappas.empty(), "generate_dataset: heat2d needs at least one kappa");
        for (double k : cfg.kappas) {
            check(k >= 0.0, "generate_dataset: negative diffusivity blows up");
        }
    }
    std::filesystem::create_directories(dir);

    DatasetManifest m;
    m.generator = cfg.kind;
    m.trajectories = cfg.trajectories;
    m.frames = cfg.frames;
    m.H = cfg.H;
    m.W = cfg.W;
    m.D = cfg.D;
    m.dt = cfg.dt;
    for (std::int64_t d = 0; d < cfg.D; ++d) {
        m.channel_names.push_back("u" + std::to_string(d));
    }
    m.params = {{"max_mode", cfg.max_mode}, {"n_modes", cfg.n_modes}, {"seed", cfg.seed}};
    if (cfg.kind == "heat2d") {
        m.params["kappas"] = cfg.kappas;
    } else {
        m.params["cx"] = cfg.cx;
        m.params["cy"] = cfg.cy;
    }

    // Accumulate train-split moments while writing the files.
    std::vector<double> sum(static_cast<std::size_t>(cfg.D), 0.0);
    std::vector<double> sumsq(static_cast<std::size_t>(cfg.D), 0.0);
    double train_count = 0.0;

    for (std::int64_t i = 0; i < cfg.trajectories; ++i) {
        std::mt19937_64 rng(splitmix64(cfg.seed) ^ splitmix64(static_cast<std::uint64_t>(i) +
                                                              0x517cc1b727220a95ull));
        std::vector<std::vector<ModeSpec>> channel_modes;
        for (std::int64_t d = 0; d < cfg.D; ++d) {
            channel_modes.push_back(random_modes(rng, cfg.max_mode, cfg.n_modes));
        }
        Tensor traj;
        if (cfg.kind == "heat2d") {
            const double kappa =
                cfg.kappas[static_cast<std::size_t>(i) % cfg.kappas.size()];
            m.traj_param.push_back(kappa);
            traj = heat2d_from_modes(channel_modes, cfg.H, cfg.W, cfg.frames, cfg.dt, kappa);
        } else {
            traj = advection2d_from_modes(channel_modes, cfg.H, cfg.W, cfg.frames, cfg.dt,
                                          cfg.cx, cfg.cy);
        }
        write_field_file(dir + "/" + trajectory_filename(i), traj);

        const Split s = split_of(cfg.seed, i);
        (s == Split::train ? m.train : s == Split::val ? m.val : m.test).push_back(i);
        if (s == Split::train) {
            for (std::int64_t p = 0; p < traj.size(); ++p) {
                const double v = traj.data()[static_cast<std::size_t>(p)];
                const std::size_t d = static_cast<std::size_t>(p % cfg.D);
                sum[d] += v;
                sumsq[d] += v * v;
            }
            train_count += static_cast<double>(traj.size() / cfg.D);
        }
    }
    check(!m.train.empty(), "generate_dataset: hash split left the train set empty");

    for (std::int64_t d = 0; d < cfg.D; ++d) {
        const double mean = sum[static_cast<std::size_t>(d)] / train_count;
        const double var =
            std::max(0.0, sumsq[static_cast<std::size_t>(d)] / train_count - mean * mean);
        m.stats.mean.push_back(mean);
        m.stats.stdev.push_back(std::sqrt(var));
    }
    write_manifest(dir, m);
    return m;
}

// ---------------------------------------------------------------------------
// Normalization and windowing

// (x - mean) / std per channel (last axis). Channels whose recorded std is
// effectively zero pass through untouched; their indices are reported so
// callers can warn once instead of silently rescaling noise.
inline Tensor normalize(const Tensor& frames, const ChannelStats& st,
                        std::vector<std::int64_t>* passthrough = nullptr) {
    const std::int64_t D = frames.extent(frames.rank() - 1);
    check(D == static_cast<std::int64_t>(st.mean.size()) &&
              D == static_cast<std::int64_t>(st.stdev.size()),
          "normalize: stats do not match channel count");
    Tensor out = frames.detach();
    for (std::int64_t d = 0; d < D; ++d) {
        const double mean = st.mean[static_cast<std::size_t>(d)];
        const double stdev = st.stdev[static_cast<std::size_t>(d)];
        check(std::isfinite(mean) && std::isfinite(stdev), "normalize: non-finite stats");
        if (stdev <= 1e-12) {
            if (passthrough) passthrough->push_back(d);
            continue;
        }
        for (std::int64_t p = d; p < out.size(); p += D) {
            double& v = out.data()[static_cast<std::size_t>(p)];
            v = (v - mean) / stdev;
        }
    }
    return out;
}

inline Tensor denormalize(const Tensor& frames, const ChannelStats& st,
                          std::vector<std::int64_t>* passthrough = nullptr) {
    const std::int64_t D = frames.extent(frames.rank() - 1);
    check(D == static_cast<std::int64_t>(st.mean.size()) &&
              D == static_cast<std::int64_t>(st.stdev.size()),
          "denormalize: stats do not match channel count");
    Tensor out = frames.detach();
    for (std::int64_t d = 0; d < D; ++d) {
        const double mean = st.mean[static_cast<std::size_t>(d)];
        const double stdev = st.stdev[static_cast<std::size_t>(d)];
        if (stdev <= 1e-12) {
            if (passthrough) passthrough->push_back(d);
            continue;
        }
        for (std::int64_t p = d; p < out.size(); p += D) {
            double& v = out.data()[static_cast<std::size_t>(p)];
            v = v * stdev + mean;
        }
    }
    return out;
}

struct Window {
    FieldSequence input;  // T frames at unit spacing
    Tensor targets;       // (K,H,W,D), offsets 1..K past the newest input frame
};

struct WindowSet {
    std::vector<Window> windows;
    std::int64_t skipped = 0;  // trajectories shorter than T+K
};

inline std::vector<Window> make_windows(const Tensor& traj, std::int64_t T, std::int64_t K,
                                        std::int64_t stride) {
    check(traj.rank() == 4, "make_windows: expected (T,H,W,D) trajectory");
    check(T >= 1 && K >= 1 && stride >= 1, "make_windows: T, K, stride must be >= 1");
    std::vector<Window> out;
    const std::int64_t L = traj.extent(0);
    for (std::int64_t s = 0; s + T + K <= L; s += stride) {
        Window w;
        w.input.frames = slice(traj, 0, s, T).detach();
        w.input.timestamps = unit_timestamps(T);
        w.targets = slice(traj, 0, s + T, K).detach();
        out.push_back(std::move(w));
    }
    return out;
}

inline WindowSet make_windows(const std::vector<Tensor>& trajs, std::int64_t T, std::int64_t K,
                              std::int64_t stride) {
    WindowSet set;
    for (const Tensor& traj : trajs) {
        if (traj.extent(0) < T + K) {
            set.skipped++;
            continue;
        }
        auto ws = make_windows(traj, T, K, stride);
        for (auto& w : ws) {
            set.windows.push_back(std::move(w));
        }
    }
    return set;
}

}  // namespace tante
