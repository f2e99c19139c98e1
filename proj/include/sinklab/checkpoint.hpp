#pragma once

#include <string>

#include "sinklab/model.hpp"

namespace sinklab {

// Flat binary container: a manifest (name, shape, dtype, byte offset per
// tensor) followed by raw little-endian fp64 buffers, with a sidecar
// structured-text record of the ModelConfig at <path>.config.
// Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const Parameters& params, const ModelConfig& cfg);

struct LoadedCheckpoint {
    ModelConfig cfg;
    Parameters params;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace sinklab
