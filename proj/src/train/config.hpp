#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "common/json_util.hpp"
#include "data/episode.hpp"
#include "data/generator.hpp"
#include "model/model.hpp"

namespace m3f::train {

struct MaskingConfig {
    double ratio = 0.05;
    std::size_t applications_per_sample = 1;
    bool operator==(const MaskingConfig&) const = default;
};

struct StageConfig {
    int stage = 1;
    std::size_t epochs = 5;
    std::size_t batch_size = 8;
    float lr = 3e-4f;
    bool use_adapters = false;
    // Stage 2 only. When a curriculum is present it overrides these fields per phase.
    std::optional<MaskingConfig> masking;
    // Answer options per classification prompt (stages 1-2; stage 4 uses the episode).
    std::size_t n_way = 5;
    // Stage 4: optimizer steps per task.
    std::size_t steps = 20;
    // Input jitter during training (the data-augmentation arm).
    bool augment = false;
    bool operator==(const StageConfig&) const = default;
};

struct CurriculumPhase {
    std::size_t n_way = 5;
    double ratio = 0.05;
    std::size_t applications = 1;
    std::size_t epochs = 1;
    bool operator==(const CurriculumPhase&) const = default;
};

struct CurriculumSchedule {
    std::vector<CurriculumPhase> phases;
    bool operator==(const CurriculumSchedule&) const = default;
};

/// Validation error unless n_way and applications are both nondecreasing
/// across phases, every phase has at least one epoch and application, and
/// ratios lie in [0, 1].
void validate(const CurriculumSchedule& schedule);

struct AdapterConfig {
    std::size_t rank = 16;
    float alpha = 0.0f;  // <= 0 selects 2 * rank
    // Stage 3 continues with the stage-2 adapter set; false re-initializes it.
    bool share_across_stages = true;
    bool operator==(const AdapterConfig&) const = default;
};

struct SplitConfig {
    // Classes per modality withheld from stages 1-3 for few-shot evaluation.
    std::size_t heldout_classes_per_modality = 5;
    bool operator==(const SplitConfig&) const = default;
};

struct EvalConfig {
    data::EpisodeParams episode{5, 5, 1};
    std::size_t episodes = 200;
    bool operator==(const EvalConfig&) const = default;
};

struct TrainConfig {
    model::ModelConfig model;
    data::GeneratorSpec data;
    std::optional<std::string> records;  // load samples from disk instead of generating
    SplitConfig split;
    std::array<StageConfig, 4> stages;
    CurriculumSchedule curriculum;
    AdapterConfig adapters;
    EvalConfig eval;
    std::uint64_t seed = 0;
};

TrainConfig default_train_config();

/// Strict: unknown keys anywhere are configuration errors. Missing keys keep
/// the defaults of default_train_config().
TrainConfig train_config_from_json(const json& j);
json to_json(const TrainConfig& cfg);
void validate(const TrainConfig& cfg);

/// Samples from cfg.records when set, otherwise the synthetic generator.
data::Dataset load_dataset(const TrainConfig& cfg);

json to_json(const StageConfig& s);
json to_json(const CurriculumSchedule& c);

}  // namespace m3f::train
