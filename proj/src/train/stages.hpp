#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "data/episode.hpp"
#include "data/sample.hpp"
#include "train/checkpoint.hpp"
#include "train/config.hpp"
#include "train/log.hpp"

namespace m3f::train {

struct DataSplit {
    data::Dataset pretrain;
    data::Dataset heldout;
};

/// Withholds `heldout_per_modality` classes of each modality (chosen by
/// `seed`) for few-shot evaluation. Validation error when a modality has too
/// few classes to leave at least two for pretraining.
DataSplit split_classes(const data::Dataset& ds, std::size_t heldout_per_modality, std::uint64_t seed);

struct StageReport {
    int stage = 0;
    std::vector<double> step_losses;
    std::vector<double> epoch_losses;  // mean training loss per epoch
    // Stages 1-2: label loss on a fixed held-in batch, before training and after
    // each epoch. Stage 3: description perplexity after each epoch.
    std::vector<double> heldin;
    std::size_t trainable_scalars = 0;
    std::size_t total_scalars = 0;
};

/// Full-model classification training; prompts drawn uniformly from the
/// template bank per sample, options = gold plus same-modality distractors.
StageReport run_stage1(TrainState& state, const data::Dataset& ds, const StageConfig& cfg, TrainLog& log,
                       std::uint64_t seed);

/// Curriculum over phases (or a single phase from cfg.masking when the
/// schedule is empty). Each sample contributes `applications` independently
/// masked views per step; their losses are averaged. With neither a schedule
/// nor cfg.masking the views are unmasked (the no-masking control).
StageReport run_stage2(TrainState& state, const data::Dataset& ds, const StageConfig& cfg,
                       const CurriculumSchedule& schedule, const AdapterConfig& acfg, TrainLog& log,
                       std::uint64_t seed);

/// Description generation on samples that carry one.
StageReport run_stage3(TrainState& state, const data::Dataset& ds, const StageConfig& cfg, const AdapterConfig& acfg,
                       TrainLog& log, std::uint64_t seed);

struct EpisodeOutcome {
    std::uint64_t seed = 0;
    std::vector<std::string> labels;
    std::vector<std::string> query_ids;
    std::vector<std::size_t> golds;
    std::vector<std::size_t> preds;
    std::vector<std::size_t> control_preds;  // before any stage-4 update
    std::vector<double> step_losses;
};

struct Stage4Report {
    std::vector<EpisodeOutcome> episodes;
    double micro_f1 = 0.0;
    double control_micro_f1 = 0.0;
    double frozen_fraction = 0.0;
    std::size_t trainable_scalars = 0;
    std::size_t total_scalars = 0;
};

/// Per episode: fresh task adapters plus the target-modality encoder are
/// trained on the support set for cfg.steps steps, the queries are scored by
/// option likelihood, then the adapters are removed and the encoder restored.
/// Stage-2/3 adapters are merged into the base weights first. Validation error
/// when an episode class was seen in stages 1-3.
Stage4Report run_stage4(TrainState& state, const data::Dataset& target, std::span<const data::Episode> episodes,
                        const StageConfig& cfg, const AdapterConfig& acfg, TrainLog& log, std::uint64_t seed,
                        bool zero_shot_control = true);

/// Option index predicted for one sample with the first classification template.
std::size_t predict_label(const TrainState& state, const data::Sample& sample, std::span<const std::string> options);

}  // namespace m3f::train
