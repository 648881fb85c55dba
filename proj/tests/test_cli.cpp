// End-to-end checks of the command-line tool: each case shells out to the
// built binary and inspects exit codes and produced artifacts. Everything
// runs on deliberately tiny grids so the whole file finishes in seconds.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "tante/checkpoint.hpp"

using namespace tante;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name)
        : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& s) const { return (path / s).string(); }
};

int run(const std::string& args, const std::string& log) {
    const std::string cmd = std::string(TANTE_CLI_PATH) + " " + args + " > " + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool exists(const std::string& path) { return std::filesystem::exists(path); }

// One small dataset shared by the cases below; regenerating it per case
// would dominate the runtime for no extra coverage.
const std::string tiny_model_args =
    " --set patch=2 --set embed_dim=16 --set mlp_dim=16 --set heads=2"
    " --set blocks=3 --set input_frames=3 --set horizon=2";

std::string make_dataset(const TempDir& tmp) {
    const std::string dir = tmp.sub("data");
    const int rc = run("generate-data --out " + dir +
                           " --set trajectories=12 --set frames=10 --set grid_h=8"
                           " --set grid_w=8 --set kappas=0.002,0.05 --set seed=7",
                       tmp.sub("gen.log"));
    REQUIRE(rc == 0);
    return dir;
}

}  // namespace

TEST_CASE("pipeline: generate, train, evaluate, rollout, analyze") {
    TempDir tmp("tante_cli_pipeline");
    const std::string data = make_dataset(tmp);
    REQUIRE(exists(data + "/manifest.json"));
    REQUIRE(exists(data + "/config.txt"));

    const std::string runa = tmp.sub("run");
    REQUIRE(run("train --dataset " + data + " --out " + runa + tiny_model_args +
                    " --set iterations=8 --set checkpoint_every=4 --set warmup_steps=4",
                tmp.sub("train.log")) == 0);
    REQUIRE(exists(runa + "/config.txt"));
    REQUIRE(exists(runa + "/checkpoints/ckpt_000004.bin"));
    REQUIRE(exists(runa + "/checkpoints/ckpt_final.bin"));
    const std::string curve = read_text(runa + "/metrics/loss.csv");
    REQUIRE(curve.rfind("step,loss,mse,reg,lr,mean_radius\n", 0) == 0);

    const std::string ckpt = runa + "/checkpoints/ckpt_final.bin";
    const std::string evala = tmp.sub("eval");
    REQUIRE(run("evaluate --dataset " + data + " --checkpoint " + ckpt + " --out " + evala +
                    " --set horizons=2,4",
                tmp.sub("eval.log")) == 0);
    REQUIRE(exists(evala + "/config.txt"));
    for (const std::string h : {"2", "4"}) {
        REQUIRE(exists(evala + "/metrics/eval_T" + h + ".json"));
        const std::string steps = read_text(evala + "/metrics/eval_T" + h + "_steps.csv");
        REQUIRE(steps.rfind("step,rel_l2_mean,rel_l2_std\n", 0) == 0);
    }

    const std::string rolla = tmp.sub("roll");
    REQUIRE(run("rollout --dataset " + data + " --checkpoint " + ckpt + " --out " + rolla +
                    " --set steps=5 --set trajectory=2",
                tmp.sub("roll.log")) == 0);
    const std::string trace = read_text(rolla + "/traces/trace.csv");
    REQUIRE(trace.rfind("invocation,tau,radius,evaluated_offsets\n", 0) == 0);
    // 5 unit-step targets at radius ~3.5 need exactly two invocations.
    REQUIRE(std::count(trace.begin(), trace.end(), '\n') >= 2);
    // Emitted block is (5,8,8,1) float32.
    REQUIRE(std::filesystem::file_size(rolla + "/traces/predictions.bin") == 5 * 8 * 8 * 4);

    const std::string rada = tmp.sub("radius");
    REQUIRE(run("analyze-radius --dataset " + data + " --checkpoint " + ckpt + " --out " +
                    rada + " --set split=train --set steps=5",
                tmp.sub("radius.log")) == 0);
    const std::string report = read_text(rada + "/metrics/radius_report.csv");
    REQUIRE(report.rfind("group,count,q1,median,q3,p_vs_next,stars\n", 0) == 0);
    REQUIRE(report.find("kappa=0.002") != std::string::npos);
    REQUIRE(report.find("kappa=0.05") != std::string::npos);
    REQUIRE(exists(rada + "/metrics/radius_samples.csv"));
}

TEST_CASE("training is reproducible from the command line") {
    TempDir tmp("tante_cli_repro");
    const std::string data = make_dataset(tmp);
    const std::string common = "train --dataset " + data + tiny_model_args +
                               " --set iterations=6 --set seed=11 --set warmup_steps=3";
    REQUIRE(run(common + " --out " + tmp.sub("a"), tmp.sub("a.log")) == 0);
    REQUIRE(run(common + " --out " + tmp.sub("b"), tmp.sub("b.log")) == 0);
    REQUIRE(read_text(tmp.sub("a") + "/metrics/loss.csv") ==
            read_text(tmp.sub("b") + "/metrics/loss.csv"));
    REQUIRE(read_text(tmp.sub("a") + "/config.txt") == read_text(tmp.sub("b") + "/config.txt"));
}

TEST_CASE("config file loads and --set overrides it") {
    TempDir tmp("tante_cli_layering");
    const std::string data = make_dataset(tmp);
    {
        std::ofstream cfg(tmp.sub("train.cfg"));
        cfg << "# smoke settings\niterations = 50\nseed = 3\n";
    }
    REQUIRE(run("train --dataset " + data + " --config " + tmp.sub("train.cfg") +
                    tiny_model_args + " --set iterations=2 --out " + tmp.sub("run"),
                tmp.sub("run.log")) == 0);
    const std::string snap = read_text(tmp.sub("run") + "/config.txt");
    REQUIRE(snap.find("iterations = 2\n") != std::string::npos);
    REQUIRE(snap.find("seed = 3\n") != std::string::npos);
    // Snapshot is itself a loadable config: rerunning from it reproduces the run.
    REQUIRE(run("train --dataset " + data + " --config " + tmp.sub("run") + "/config.txt" +
                    " --out " + tmp.sub("rerun"),
                tmp.sub("rerun.log")) == 0);
    REQUIRE(read_text(tmp.sub("run") + "/metrics/loss.csv") ==
            read_text(tmp.sub("rerun") + "/metrics/loss.csv"));
}

TEST_CASE("zero-iteration training checkpoints the initial model") {
    TempDir tmp("tante_cli_zero_iter");
    const std::string data = make_dataset(tmp);
    REQUIRE(run("train --dataset " + data + " --out " + tmp.sub("run") + tiny_model_args +
                    " --set iterations=0 --set model_seed=5",
                tmp.sub("run.log")) == 0);
    const std::string ckpt = tmp.sub("run") + "/checkpoints/ckpt_final.bin";
    REQUIRE(exists(ckpt));
    TanteModel restored = load_model(ckpt);
    TanteModel fresh(restored.cfg, 5);
    auto a = restored.params(), b = fresh.params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        // Weights roundtrip through float32, so compare at that precision.
        for (std::size_t j = 0; j < a[i].second.data().size(); ++j) {
            REQUIRE(static_cast<float>(a[i].second.data()[j]) ==
                    static_cast<float>(b[i].second.data()[j]));
        }
    }
}

TEST_CASE("usage errors exit 1, runtime errors exit 2") {
    TempDir tmp("tante_cli_exits");
    REQUIRE(run("train --dataset x --out " + tmp.sub("r1") + " --set nonsense=1",
                tmp.sub("l1.log")) == 1);
    REQUIRE(read_text(tmp.sub("l1.log")).find("unknown key") != std::string::npos);
    REQUIRE(run("train --dataset " + tmp.sub("missing") + " --out " + tmp.sub("r2") +
                    " --set iterations=1",
                tmp.sub("l2.log")) == 2);
    REQUIRE(run("generate-data --set trajectories=1", tmp.sub("l3.log")) == 1);  // no --out
    REQUIRE(run("evaluate --dataset x --out " + tmp.sub("r3"), tmp.sub("l4.log")) == 1);
    REQUIRE(run("--help", tmp.sub("l5.log")) == 0);
    // Negative diffusivity passes config assembly, fails in the generator.
    REQUIRE(run("generate-data --out " + tmp.sub("r4") + " --set kappas=-1",
                tmp.sub("l6.log")) == 2);
}

TEST_CASE("gradcheck subcommand audits a perturbed model") {
    TempDir tmp("tante_cli_gradcheck");
    REQUIRE(run("gradcheck --set grid=8 --set samples=1 --set input_frames=3",
                tmp.sub("g.log")) == 0);
    const std::string log = read_text(tmp.sub("g.log"));
    REQUIRE(log.find("overall max relative error") != std::string::npos);
    REQUIRE(log.find("radius0") != std::string::npos);
    REQUIRE(log.find("deriv1") != std::string::npos);
}
