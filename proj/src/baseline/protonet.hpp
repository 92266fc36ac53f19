#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "common/json_util.hpp"
#include "data/episode.hpp"
#include "data/sample.hpp"
#include "model/params.hpp"
#include "train/log.hpp"

namespace m3f::baseline {

using ad::Tape;
using ad::Tensor;

struct ProtoConfig {
    std::size_t width = 64;
    std::size_t out = 64;
    // Fixed-size inputs: images pooled to grid x grid per channel, volumes to
    // (grid / 2) x grid x grid, series resampled to `steps` x `features`,
    // tables summarized by per-column mean and std over `columns` columns.
    std::size_t grid = 8;
    std::size_t steps = 16;
    std::size_t features = 16;
    std::size_t columns = 16;
};

ProtoConfig proto_config_from_json(const json& j);
json to_json(const ProtoConfig& cfg);

/// One two-layer MLP per modality ("proto.<modality>.fc1/fc2"); no weights
/// are shared with the multimodal model.
struct ProtoModel {
    ProtoConfig config;
    model::ParamStore params;
};

ProtoModel init_protonet(const ProtoConfig& cfg, std::uint64_t seed);

/// Input vector fed to the modality's MLP.
std::vector<float> input_features(const data::Sample& s, const ProtoConfig& cfg);

/// [n x out] embeddings, row i for samples[i].
Tensor embed(Tape& tape, const ProtoModel& m, std::span<const data::Sample* const> samples);

/// [n_way x d] class means of `support` rows (rows summed in order, then divided).
Tensor prototypes(Tape& tape, const Tensor& support, std::span<const std::size_t> classes, std::size_t n_way);

/// Cross entropy of softmax(-squared distance) against the query classes.
Tensor prototype_loss(Tape& tape, const Tensor& support, std::span<const std::size_t> support_classes,
                      const Tensor& query, std::span<const std::size_t> query_classes, std::size_t n_way);

/// Index of the nearest prototype per query row; lowest index on ties.
std::vector<std::size_t> nearest_prototype(const Tensor& query, const Tensor& protos);

Tensor episode_loss(Tape& tape, const ProtoModel& m, const data::Dataset& ds, const data::Episode& ep);
std::vector<std::size_t> classify(const ProtoModel& m, const data::Dataset& ds, const data::Episode& ep);

struct BaselineConfig {
    ProtoConfig model;
    data::EpisodeParams train_episode{5, 5, 5};
    std::size_t episodes_per_epoch = 100;
    std::size_t epochs = 5;
    float lr = 1e-3f;
};

BaselineConfig baseline_config_from_json(const json& j);
json to_json(const BaselineConfig& cfg);

struct BaselineReport {
    std::vector<double> epoch_losses;
    std::vector<std::vector<std::size_t>> preds;  // per evaluation episode
    std::vector<std::vector<std::size_t>> golds;
    double micro_f1 = 0.0;
};

/// Episodic training on `train` classes, then classification of every
/// evaluation episode (drawn from `test`). Validation error when any
/// evaluation class also appears in `train`.
BaselineReport train_baseline(ProtoModel& m, const data::Dataset& train, const data::Dataset& test,
                              std::span<const data::Episode> eval_episodes, const BaselineConfig& cfg,
                              std::uint64_t seed, train::TrainLog* log = nullptr);

}  // namespace m3f::baseline
