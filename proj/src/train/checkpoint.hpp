#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "adapters/adapters.hpp"
#include "model/model.hpp"

namespace m3f::train {

struct Lineage {
    std::vector<int> stages;                    // completed stages, in order
    std::vector<std::string> pretrain_classes;  // labels seen in stages 1-3

    bool has(int stage) const;
};

/// Everything a stage reads and writes.
struct TrainState {
    model::Model model;
    std::vector<adapters::AdapterSet> adapter_sets;
    Lineage lineage;

    adapters::AdapterSet* adapter_set(const std::string& tag);
};

TrainState fresh_state(const model::ModelConfig& cfg, std::uint64_t seed);

/// Deep copy: parameter buffers are not shared with `state`.
TrainState clone_state(const TrainState& state);

/// <dir>/manifest.json plus one tensor segment per component
/// (encoder.<modality>, special, projector, decoder, adapter.<tag>). The
/// manifest lists every parameter's name, shape, trainable flag and segment.
void save_checkpoint(const TrainState& state, const std::filesystem::path& dir);
TrainState load_checkpoint(const std::filesystem::path& dir);

}  // namespace m3f::train
