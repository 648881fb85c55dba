#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "tante/datasets.hpp"

using namespace tante;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

std::vector<char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("single heat mode decays by the analytic factor") {
    std::vector<std::vector<ModeSpec>> modes = {{{1, 0, 1.0, 0.0}}};
    const double kappa = 0.01, dt = 0.7;
    Tensor traj = heat2d_from_modes(modes, 8, 8, 3, dt, kappa);
    const double factor = std::exp(-kappa * 4.0 * M_PI * M_PI * dt);
    for (std::int64_t f = 1; f < 3; ++f) {
        for (std::int64_t p = 0; p < 64; ++p) {
            const double expected =
                traj.data()[static_cast<std::size_t>(p)] * std::pow(factor, double(f));
            REQUIRE(traj.data()[static_cast<std::size_t>(f * 64 + p)] ==
                    Catch::Approx(expected).margin(1e-14));
        }
    }
}

TEST_CASE("zero diffusivity freezes the field") {
    std::mt19937_64 rng(5);
    std::vector<std::vector<ModeSpec>> modes = {random_modes(rng, 3, 5)};
    Tensor traj = heat2d_from_modes(modes, 6, 7, 4, 1.0, 0.0);
    for (std::int64_t f = 1; f < 4; ++f) {
        for (std::int64_t p = 0; p < 42; ++p) {
            REQUIRE(traj.data()[static_cast<std::size_t>(f * 42 + p)] ==
                    traj.data()[static_cast<std::size_t>(p)]);
        }
    }
}

TEST_CASE("heat evolution is linear in the initial modes") {
    std::mt19937_64 rng(7);
    std::vector<ModeSpec> a = random_modes(rng, 3, 4);
    std::vector<ModeSpec> b = random_modes(rng, 3, 4);
    std::vector<ModeSpec> both = a;
    both.insert(both.end(), b.begin(), b.end());

    Tensor ta = heat2d_from_modes({a}, 8, 8, 5, 0.3, 0.02);
    Tensor tb = heat2d_from_modes({b}, 8, 8, 5, 0.3, 0.02);
    Tensor tboth = heat2d_from_modes({both}, 8, 8, 5, 0.3, 0.02);
    Tensor sum = ta.detach();
    for (std::size_t i = 0; i < sum.data().size(); ++i) {
        sum.data()[i] += tb.data()[i];
    }
    REQUIRE(max_abs_diff(tboth, sum) < 1e-12);
}

TEST_CASE("negative diffusivity is rejected") {
    std::vector<std::vector<ModeSpec>> modes = {{{1, 0, 1.0, 0.0}}};
    REQUIRE_THROWS(heat2d_from_modes(modes, 4, 4, 2, 1.0, -0.01));
    GenerateConfig cfg;
    cfg.kappas = {-1.0};
    REQUIRE_THROWS(generate_dataset("/tmp/should_not_exist_neg_kappa", cfg));
}

TEST_CASE("heat trajectories never gain energy") {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 4; ++rep) {
        std::vector<std::vector<ModeSpec>> modes = {random_modes(rng, 4, 6)};
        Tensor traj = heat2d_from_modes(modes, 12, 12, 8, 0.5, 0.03);
        double prev = std::numeric_limits<double>::infinity();
        for (std::int64_t f = 0; f < 8; ++f) {
            double e = 0.0;
            for (std::int64_t p = 0; p < 144; ++p) {
                const double v = traj.data()[static_cast<std::size_t>(f * 144 + p)];
                e += v * v;
            }
            REQUIRE(e <= prev + 1e-12);
            prev = e;
        }
    }
}

TEST_CASE("zero velocity advection is constant") {
    std::mt19937_64 rng(13);
    std::vector<std::vector<ModeSpec>> modes = {random_modes(rng, 3, 5)};
    Tensor traj = advection2d_from_modes(modes, 6, 6, 4, 1.0, 0.0, 0.0);
    for (std::int64_t f = 1; f < 4; ++f) {
        for (std::int64_t p = 0; p < 36; ++p) {
            REQUIRE(traj.data()[static_cast<std::size_t>(f * 36 + p)] ==
                    Catch::Approx(traj.data()[static_cast<std::size_t>(p)]).margin(1e-14));
        }
    }
}

TEST_CASE("advecting one grid cell per frame circularly shifts the array") {
    std::mt19937_64 rng(17);
    const std::int64_t H = 8, W = 8;
    std::vector<std::vector<ModeSpec>> modes = {random_modes(rng, 3, 6)};
    // cx*dt = 1/W: each frame moves the pattern one column to the right.
    Tensor traj = advection2d_from_modes(modes, H, W, 2, 1.0, 1.0 / double(W), 0.0);
    for (std::int64_t i = 0; i < H; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
            const double moved = traj.data()[static_cast<std::size_t>(H * W + i * W + j)];
            const double source = traj.data()[static_cast<std::size_t>(i * W + (j - 1 + W) % W)];
            REQUIRE(moved == Catch::Approx(source).margin(1e-10));
        }
    }
}

TEST_CASE("integer domain wraps return the initial field") {
    std::mt19937_64 rng(19);
    std::vector<std::vector<ModeSpec>> modes = {random_modes(rng, 4, 5)};
    // cx*dt = 1 and cy*dt = 2: whole-domain wraps every frame.
    Tensor traj = advection2d_from_modes(modes, 7, 5, 4, 0.5, 2.0, 4.0);
    for (std::int64_t f = 1; f < 4; ++f) {
        for (std::int64_t p = 0; p < 35; ++p) {
            REQUIRE(traj.data()[static_cast<std::size_t>(f * 35 + p)] ==
                    Catch::Approx(traj.data()[static_cast<std::size_t>(p)]).margin(1e-10));
        }
    }
}

TEST_CASE("advection conserves the spatial mean") {
    std::mt19937_64 rng(23);
    std::vector<std::vector<ModeSpec>> modes = {random_modes(rng, 3, 6),
                                                random_modes(rng, 3, 6)};
    Tensor traj = advection2d_from_modes(modes, 10, 12, 6, 1.0, 0.37, -0.21);
    for (std::int64_t d = 0; d < 2; ++d) {
        double mean0 = 0.0;
        for (std::int64_t p = 0; p < 120; ++p) {
            mean0 += traj.data()[static_cast<std::size_t>(p * 2 + d)];
        }
        for (std::int64_t f = 1; f < 6; ++f) {
            double mean = 0.0;
            for (std::int64_t p = 0; p < 120; ++p) {
                mean += traj.data()[static_cast<std::size_t>((f * 120 + p) * 2 + d)];
            }
            REQUIRE(mean == Catch::Approx(mean0).margin(1e-10));
        }
    }
}

TEST_CASE("field files roundtrip bit-exactly") {
    TempDir dir("tante_io_test");
    std::mt19937_64 rng(29);
    Tensor t = Tensor::randn({3, 4, 5, 2}, rng);
    const std::string a = dir.str() + "/a.bin";
    const std::string b = dir.str() + "/b.bin";
    write_field_file(a, t);
    Tensor back = read_field_file(a, 3, 4, 5, 2);
    write_field_file(b, back);
    REQUIRE(read_bytes(a) == read_bytes(b));
    // Values match the stored single-precision quantization.
    for (std::size_t i = 0; i < t.data().size(); ++i) {
        REQUIRE(back.data()[i] == static_cast<double>(static_cast<float>(t.data()[i])));
    }
    SECTION("shape mismatch is caught") {
        REQUIRE_THROWS(read_field_file(a, 3, 4, 5, 3));
        REQUIRE_THROWS(read_field_file(a, 3, 4, 5, 1));
    }
}

TEST_CASE("hash splits are deterministic, disjoint, and near 80/10/10") {
    const std::uint64_t seed = 31;
    int counts[3] = {0, 0, 0};
    for (std::int64_t i = 0; i < 2000; ++i) {
        Split s = split_of(seed, i);
        REQUIRE(s == split_of(seed, i));
        counts[static_cast<int>(s)]++;
    }
    REQUIRE(counts[0] + counts[1] + counts[2] == 2000);
    REQUIRE(std::abs(counts[0] - 1600) < 80);
    REQUIRE(std::abs(counts[1] - 200) < 60);
    REQUIRE(std::abs(counts[2] - 200) < 60);
}

TEST_CASE("generate_dataset writes a loadable, reproducible dataset") {
    GenerateConfig cfg;
    cfg.trajectories = 12;
    cfg.frames = 10;
    cfg.H = 8;
    cfg.W = 8;
    cfg.D = 1;
    cfg.kappas = {0.002, 0.05};
    cfg.seed = 37;

    TempDir dir("tante_gen_test");
    DatasetManifest m = generate_dataset(dir.str(), cfg);
    REQUIRE(m.trajectories == 12);
    REQUIRE(static_cast<std::int64_t>(m.train.size() + m.val.size() + m.test.size()) == 12);
    REQUIRE(m.traj_param.size() == 12);
    REQUIRE(m.traj_param[0] == 0.002);
    REQUIRE(m.traj_param[1] == 0.05);

    DatasetManifest r = read_manifest(dir.str());
    REQUIRE(r.generator == "heat2d");
    REQUIRE(r.stats.mean == m.stats.mean);
    REQUIRE(r.stats.stdev == m.stats.stdev);
    REQUIRE(r.train == m.train);

    // Trajectory files have the advertised size and reload cleanly.
    for (std::int64_t i = 0; i < 12; ++i) {
        const auto path = dir.path / trajectory_filename(i);
        REQUIRE(std::filesystem::file_size(path) ==
                static_cast<std::uintmax_t>(10 * 8 * 8 * 1 * 4));
        Tensor t = load_trajectory(dir.str(), r, i);
        REQUIRE(t.shape() == Shape{10, 8, 8, 1});
    }

    SECTION("regeneration is byte-identical") {
        std::vector<char> before = read_bytes((dir.path / "traj_00003.bin").string());
        TempDir dir2("tante_gen_test2");
        generate_dataset(dir2.str(), cfg);
        REQUIRE(read_bytes((dir2.path / "traj_00003.bin").string()) == before);
    }

    SECTION("train stats standardize the train split") {
        // Pooled mean of normalized train data should vanish; std should be 1.
        double acc = 0.0, accsq = 0.0, count = 0.0;
        for (std::int64_t i : r.train) {
            Tensor t = normalize(load_trajectory(dir.str(), r, i), r.stats);
            for (double v : t.data()) {
                acc += v;
                accsq += v * v;
                count += 1.0;
            }
        }
        REQUIRE(std::abs(acc / count) < 1e-3);
        REQUIRE(std::abs(accsq / count - 1.0) < 1e-2);
    }
}

TEST_CASE("normalization matches hand cases and inverts") {
    ChannelStats st;
    st.mean = {2.0, -1.0};
    st.stdev = {4.0, 0.5};

    Tensor x = Tensor::zeros({1, 1, 3, 2});
    x.data() = {2.0, -1.0, 6.0, 0.0, -2.0, -1.5};
    Tensor n = normalize(x, st);
    REQUIRE(n.data() == std::vector<double>{0.0, 0.0, 1.0, 2.0, -1.0, -1.0});

    SECTION("identity stats are the identity") {
        ChannelStats id;
        id.mean = {0.0, 0.0};
        id.stdev = {1.0, 1.0};
        REQUIRE(normalize(x, id).data() == x.data());
    }
    SECTION("roundtrip on random data") {
        std::mt19937_64 rng(41);
        Tensor r = Tensor::randn({4, 3, 3, 2}, rng, 3.0);
        REQUIRE(max_abs_diff(denormalize(normalize(r, st), st), r) < 1e-12);
    }
    SECTION("zero-std channel passes through and is reported") {
        ChannelStats flat;
        flat.mean = {2.0, -1.0};
        flat.stdev = {4.0, 0.0};
        std::vector<std::int64_t> warned;
        Tensor n2 = normalize(x, flat, &warned);
        REQUIRE(warned == std::vector<std::int64_t>{1});
        REQUIRE(n2.data() == std::vector<double>{0.0, -1.0, 1.0, 0.0, -1.0, -1.5});
        REQUIRE(denormalize(n2, flat).data() == x.data());
    }
    SECTION("stats of the wrong arity are rejected") {
        ChannelStats bad;
        bad.mean = {0.0};
        bad.stdev = {1.0};
        REQUIRE_THROWS(normalize(x, bad));
    }
}

TEST_CASE("window extraction counts and contents") {
    std::mt19937_64 rng(43);
    Tensor traj = Tensor::randn({12, 3, 3, 1}, rng);

    auto ws = make_windows(traj, 4, 4, 1);
    REQUIRE(ws.size() == 5);
    for (std::size_t s = 0; s < ws.size(); ++s) {
        REQUIRE(ws[s].input.frames.shape() == Shape{4, 3, 3, 1});
        REQUIRE(ws[s].input.timestamps == std::vector<double>{3, 2, 1, 0});
        REQUIRE(ws[s].targets.shape() == Shape{4, 3, 3, 1});
        // First target is the frame right after the window.
        for (std::int64_t p = 0; p < 9; ++p) {
            REQUIRE(ws[s].targets.data()[static_cast<std::size_t>(p)] ==
                    traj.data()[static_cast<std::size_t>((s + 4) * 9 + p)]);
        }
    }

    SECTION("stride covering the whole trajectory yields one window") {
        REQUIRE(make_windows(traj, 4, 4, 12).size() == 1);
    }
    SECTION("eight-step evaluation windows") {
        REQUIRE(make_windows(traj, 4, 8, 1).size() == 1);
    }
    SECTION("short trajectories are skipped with a count") {
        std::vector<Tensor> trajs = {traj, Tensor::zeros({7, 3, 3, 1}),
                                     Tensor::zeros({12, 3, 3, 1})};
        WindowSet set = make_windows(trajs, 4, 4, 1);
        REQUIRE(set.skipped == 1);
        REQUIRE(set.windows.size() == 10);
    }
}
