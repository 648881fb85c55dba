#pragma once

// Timestamped frame sequences: the unit of model input. Frames are ordered
// oldest to newest; timestamps store each frame's time distance to the
// newest frame (so the newest carries 0). Spacing may be fractional.

#include <cmath>
#include <vector>

#include "tante/tensor.hpp"

namespace tante {

struct FieldSequence {
    Tensor frames;                   // (T,H,W,D)
    std::vector<double> timestamps;  // (T), distances to the newest frame

    std::int64_t T() const { return frames.extent(0); }
    std::int64_t H() const { return frames.extent(1); }
    std::int64_t W() const { return frames.extent(2); }
    std::int64_t D() const { return frames.extent(3); }

    void validate() const {
        check(frames.defined() && frames.ndim() == 4, "FieldSequence: frames must be (T,H,W,D)");
        check(static_cast<std::int64_t>(timestamps.size()) == T(),
              "FieldSequence: expected one timestamp per frame");
        check(!timestamps.empty() && timestamps.back() == 0.0,
              "FieldSequence: newest frame must be at distance 0");
        for (double t : timestamps) {
            check(std::isfinite(t), "FieldSequence: non-finite timestamp");
        }
        for (double v : frames.data()) {
            check(std::isfinite(v), "FieldSequence: non-finite frame value");
        }
    }

    /// Frame i as an (H,W,D) tensor sharing no storage with the sequence.
    Tensor frame(std::int64_t i) const {
        return reshape(slice(frames, 0, i, 1), {H(), W(), D()});
    }
    Tensor newest() const { return frame(T() - 1); }
};

/// Uniform unit-spaced timestamps (T-1, ..., 1, 0).
inline std::vector<double> unit_timestamps(std::int64_t t) {
    std::vector<double> ts(static_cast<std::size_t>(t));
    for (std::int64_t i = 0; i < t; ++i) {
        ts[static_cast<std::size_t>(i)] = static_cast<double>(t - 1 - i);
    }
    return ts;
}

}  // namespace tante
