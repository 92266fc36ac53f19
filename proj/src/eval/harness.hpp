#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "baseline/protonet.hpp"
#include "eval/metrics.hpp"
#include "train/config.hpp"
#include "train/stages.hpp"

namespace m3f::eval {

enum class Arm { ours_curriculum_masking, direct_finetune, data_augmentation, protonet_baseline };

inline constexpr std::array<Arm, 4> kAllArms{Arm::ours_curriculum_masking, Arm::direct_finetune,
                                             Arm::data_augmentation, Arm::protonet_baseline};

std::string_view arm_name(Arm arm);
// Validation error for unknown names.
Arm parse_arm(std::string_view name);

struct ClassReport {
    std::string label;
    ClassScores scores;
};

struct MetricsReport {
    std::string experiment_id;
    std::string arm;
    double micro_f1 = 0.0;
    double accuracy = 0.0;
    std::optional<double> control_micro_f1;  // same model with stage 4 skipped
    std::vector<ClassReport> per_class;
    std::size_t n_episodes = 0;
    std::size_t n_queries = 0;
    std::vector<std::uint64_t> seeds;
    std::string config_hash;
    std::string query_stream_hash;  // over every episode's query ids, in order
    std::optional<json> cell;       // ablation axis and value
};

ordered_json to_json(const MetricsReport& r);
MetricsReport metrics_report_from_json(const json& j);

struct ReferenceRow {
    std::string_view arm;
    double micro_f1;
};

/// Published scores shown next to desk results, never compared against them.
std::span<const ReferenceRow> published_reference_rows();
inline constexpr double kPublishedBestRatioMicroF1 = 0.65;
inline constexpr double kPublishedBestRatio = 0.05;

struct ExperimentConfig {
    std::string id = "m3f-desk";
    train::TrainConfig train = train::default_train_config();
    baseline::BaselineConfig baseline;
    std::vector<Arm> arms{kAllArms.begin(), kAllArms.end()};
    std::vector<std::uint64_t> seeds{0};
};

ExperimentConfig experiment_config_from_json(const json& j);
json to_json(const ExperimentConfig& cfg);
/// Checks arms, seeds and that the suite can supply every evaluation
/// episode; runs before any training.
void validate(const ExperimentConfig& cfg, const data::Dataset& ds);
std::string config_hash(const ExperimentConfig& cfg);

/// Held-out-class episodes, one modality per episode in round-robin order,
/// each seeded by mix_seed(seed, index). Identical for every arm.
std::vector<data::Episode> evaluation_episodes(const data::Dataset& heldout, const train::EvalConfig& cfg,
                                               std::uint64_t seed);

struct RunOptions {
    std::optional<std::filesystem::path> out_dir;  // per-arm logs and reports
    std::ostream* progress = nullptr;
};

/// Each arm on identical episode streams for every seed, pooled per arm.
/// Training error if the query id streams of two arms differ.
std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Stage 4 on the evaluation stream of `seed`, starting from a trained
/// checkpoint. Reported under the arm name "checkpoint".
MetricsReport evaluate_checkpoint(const train::TrainState& state, const ExperimentConfig& cfg, std::uint64_t seed,
                                  const RunOptions& opts = {});

/// One pipeline stage exactly as run_experiment runs it for `seed` (same
/// split, stage seeds and evaluation stream). Stage 4 returns the metrics
/// report under "metrics"; stages 1-3 return their loss curves.
ordered_json train_stage(train::TrainState& state, const ExperimentConfig& cfg, int stage, std::uint64_t seed,
                         const RunOptions& opts = {});

std::string summary_table(std::span<const MetricsReport> reports, bool with_reference = true);
/// <dir>/reports.jsonl and <dir>/summary.txt.
void write_reports(std::span<const MetricsReport> reports, const std::filesystem::path& dir);
std::vector<MetricsReport> read_reports(const std::filesystem::path& dir);

enum class Axis { masking_applications, masking_ratio, lora_rank };

std::string_view axis_name(Axis axis);
Axis parse_axis(std::string_view name);
std::vector<double> default_axis_values(Axis axis);

struct AblationConfig {
    ExperimentConfig base;  // only the curriculum-masking arm is run
    Axis axis = Axis::masking_applications;
    std::vector<double> values;  // empty: default_axis_values(axis)
};

AblationConfig ablation_config_from_json(const json& j);

struct Trend {
    std::size_t increases = 0;
    std::size_t decreases = 0;
    bool monotone_nondecreasing = false;
    bool monotone_nonincreasing = false;
    double best_value = 0.0;
    double best_micro_f1 = 0.0;
};

struct AblationResult {
    Axis axis;
    std::vector<double> values;
    std::vector<MetricsReport> reports;
    Trend trend;
    std::string plot_data;  // whitespace-separated columns, one row per value
};

/// Every cell reuses one stage-1 checkpoint per seed and the same episode
/// stream. Validation error for unsorted or out-of-range values.
AblationResult run_ablation(const AblationConfig& cfg, const RunOptions& opts = {});
Trend trend_of(std::span<const double> values, std::span<const double> scores);
std::string trend_summary(const AblationResult& result);

}  // namespace m3f::eval
