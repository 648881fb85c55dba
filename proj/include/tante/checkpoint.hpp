#pragma once

// Single-file checkpoint: 8-byte magic, u64 manifest length, JSON manifest
// (config, step, named-parameter index with offsets), then one flat blob of
// little-endian float32 values. Loading then saving reproduces the blob
// bit-exactly because parameters round-trip through the same float32 values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tante/model.hpp"

namespace tante {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kCheckpointMagic[8] = {'T', 'A', 'N', 'T', 'E', 'C', 'P', '1'};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"n", c.n},
                          {"patch", c.patch},
                          {"embed_dim", c.embed_dim},
                          {"mlp_dim", c.mlp_dim},
                          {"heads", c.heads},
                          {"total_blocks", c.total_blocks},
                          {"r_min", c.r_min},
                          {"r_max", c.r_max},
                          {"reg_eps", c.reg_eps},
                          {"reg_m", c.reg_m},
                          {"D", c.D},
                          {"H", c.H},
                          {"W", c.W},
                          {"T", c.T}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n = j.at("n").get<std::int64_t>();
    c.patch = j.at("patch").get<std::int64_t>();
    c.embed_dim = j.at("embed_dim").get<std::int64_t>();
    c.mlp_dim = j.at("mlp_dim").get<std::int64_t>();
    c.heads = j.at("heads").get<std::int64_t>();
    c.total_blocks = j.at("total_blocks").get<std::int64_t>();
    c.r_min = j.at("r_min").get<double>();
    c.r_max = j.at("r_max").get<double>();
    c.reg_eps = j.at("reg_eps").get<double>();
    c.reg_m = j.at("reg_m").get<double>();
    c.D = j.at("D").get<std::int64_t>();
    c.H = j.at("H").get<std::int64_t>();
    c.W = j.at("W").get<std::int64_t>();
    c.T = j.at("T").get<std::int64_t>();
    return c;
}

inline void save_checkpoint(const std::string& path, const TanteModel& model,
                            std::int64_t step) {
    const NamedParams params = model.params();

    nlohmann::json manifest;
    manifest["format"] = "tante-checkpoint";
    manifest["step"] = step;
    manifest["config"] = config_to_json(model.cfg);
    nlohmann::json index = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const auto& [name, t] : params) {
        index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset},
                         {"numel", t.size()}});
        offset += t.size();
    }
    manifest["params"] = index;
    const std::string text = manifest.dump();

    std::vector<float> blob;
    blob.reserve(static_cast<std::size_t>(offset));
    for (const auto& [name, t] : params) {
        for (double v : t.data()) {
            blob.push_back(static_cast<float>(v));
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "checkpoint: cannot open " + path + " for writing");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
    check(out.good(), "checkpoint: write failed for " + path);
}

struct Checkpoint {
    ModelConfig config;
    std::int64_t step = 0;
    std::vector<std::pair<std::string, std::vector<float>>> params;
    std::vector<std::pair<std::string, Shape>> shapes;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    check(in.good() && std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0,
          "checkpoint: bad magic in " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    check(in.good(), "checkpoint: truncated manifest in " + path);
    const nlohmann::json manifest = nlohmann::json::parse(text);

    Checkpoint ckpt;
    ckpt.config = config_from_json(manifest.at("config"));
    ckpt.step = manifest.at("step").get<std::int64_t>();
    for (const auto& entry : manifest.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto numel = entry.at("numel").get<std::int64_t>();
        Shape shape = entry.at("shape").get<Shape>();
        std::vector<float> vals(static_cast<std::size_t>(numel));
        in.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(float)));
        check(in.good(), "checkpoint: truncated blob at parameter " + name);
        ckpt.params.emplace_back(name, std::move(vals));
        ckpt.shapes.emplace_back(name, std::move(shape));
    }
    return ckpt;
}

/// Builds a model from a checkpoint, overwriting every parameter with the
/// stored (float32-precision) values.
inline TanteModel model_from_checkpoint(const Checkpoint& ckpt) {
    TanteModel model(ckpt.config, /*seed=*/0);
    NamedParams params = model.params();
    check(params.size() == ckpt.params.size(),
          "checkpoint: parameter count mismatch against config");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        const auto& [ck_name, vals] = ckpt.params[i];
        check(name == ck_name, "checkpoint: parameter order mismatch at " + name);
        check(t.size() == static_cast<std::int64_t>(vals.size()),
              "checkpoint: size mismatch at " + name);
        for (std::size_t j = 0; j < vals.size(); ++j) {
            t.data()[j] = static_cast<double>(vals[j]);
        }
    }
    return model;
}

inline TanteModel load_model(const std::string& path) {
    return model_from_checkpoint(load_checkpoint(path));
}

}  // namespace tante
