#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gram/ensemble.hpp"

namespace gram {

// Binary snapshot: "GRMH" magic, u32 version, a key=value text header
// (model geometry, seed, epoch, metric history), then named float32 blobs
// for every parameter, batch-norm running stat, and any extra state the
// caller passes (optimizer momentum travels this way).

using NamedBlobs = std::vector<std::pair<std::string, std::vector<float>>>;

struct CheckpointMeta {
    uint64_t seed = 0;
    size_t epoch = 0;
    double best_top1 = 0;
    std::vector<std::string> history;  // metrics csv rows, header excluded
    std::vector<std::pair<std::string, std::string>> extra;
};

struct LoadedCheckpoint {
    EnsembleT<float> model;
    CheckpointMeta meta;
    NamedBlobs extra_blobs;
};

constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(EnsembleT<float>& model, const CheckpointMeta& meta,
                     const NamedBlobs& extra_blobs, const std::string& path);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace gram
