#include "eval/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "common/error.hpp"

namespace m3f::eval {

namespace fs = std::filesystem;
using data::Modality;

namespace {

constexpr std::array<ReferenceRow, 4> kReference{{{"ours_curriculum_masking", 0.63},
                                                  {"data_augmentation", 0.60},
                                                  {"direct_finetune", 0.53},
                                                  {"protonet_baseline", 0.50}}};

constexpr const char* kReferenceLabel = "paper-reported, not desk-reproduced";

std::uint64_t stage_seed(std::uint64_t seed, int stage) { return mix_seed(seed, 0x5354414745ull + stage); }

// Predictions of one arm for one seed, episode by episode.
struct ArmRun {
    std::vector<std::vector<std::size_t>> preds, golds, control;
    std::vector<std::vector<std::string>> query_ids;
};

ArmRun from_stage4(const train::Stage4Report& r) {
    ArmRun run;
    for (const auto& ep : r.episodes) {
        run.preds.push_back(ep.preds);
        run.golds.push_back(ep.golds);
        run.control.push_back(ep.control_preds);
        run.query_ids.push_back(ep.query_ids);
    }
    return run;
}

struct Pooled {
    std::vector<std::size_t> preds, golds, control;
    std::vector<std::string> query_ids;
    std::size_t episodes = 0;
};

// Maps episode-local class indices to positions in `labels`.
void pool_run(Pooled& p, const ArmRun& run, std::span<const data::Episode> eps,
              const std::map<std::string, std::size_t>& global) {
    for (std::size_t e = 0; e < eps.size(); ++e) {
        const auto& labels = eps[e].labels;
        for (std::size_t i = 0; i < run.preds[e].size(); ++i) {
            p.preds.push_back(global.at(labels[run.preds[e][i]]));
            p.golds.push_back(global.at(labels[run.golds[e][i]]));
            if (!run.control.empty() && !run.control[e].empty()) {
                p.control.push_back(global.at(labels[run.control[e][i]]));
            }
        }
        p.query_ids.insert(p.query_ids.end(), run.query_ids[e].begin(), run.query_ids[e].end());
        ++p.episodes;
    }
}

MetricsReport make_report(const std::string& id, std::string_view arm, const Pooled& p,
                          std::span<const std::string> labels, std::span<const std::uint64_t> seeds,
                          const std::string& hash) {
    MetricsReport r;
    r.experiment_id = id;
    r.arm = std::string(arm);
    r.micro_f1 = micro_f1(p.preds, p.golds, labels.size());
    r.accuracy = accuracy(p.preds, p.golds);
    if (std::abs(r.micro_f1 - r.accuracy) > 1e-12) {
        fail(ErrorKind::training, fmt::format("{}: micro-F1 {} differs from accuracy {} on single-label predictions",
                                              arm, r.micro_f1, r.accuracy));
    }
    if (!p.control.empty()) {
        r.control_micro_f1 = micro_f1(p.control, p.golds, labels.size());
    }
    const auto scores = per_class_scores(p.preds, p.golds, labels.size());
    for (std::size_t c = 0; c < labels.size(); ++c) {
        if (scores[c].support > 0) {
            r.per_class.push_back({labels[c], scores[c]});
        }
    }
    r.n_episodes = p.episodes;
    r.n_queries = p.preds.size();
    r.seeds.assign(seeds.begin(), seeds.end());
    r.config_hash = hash;
    r.query_stream_hash = content_hash(json(p.query_ids));
    return r;
}

std::optional<train::TrainLog> open_log(const RunOptions& opts, const std::string& name) {
    if (!opts.out_dir) {
        return train::TrainLog();
    }
    fs::create_directories(*opts.out_dir / "logs");
    const auto path = *opts.out_dir / "logs" / (name + ".jsonl");
    fs::remove(path);
    return train::TrainLog(path);
}

class Progress {
public:
    explicit Progress(std::ostream* out) : out_(out), start_(std::chrono::steady_clock::now()) {}
    void note(const std::string& what) {
        if (out_ != nullptr) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
            *out_ << fmt::format("[{:7.1f}s] {}\n", s, what) << std::flush;
        }
    }

private:
    std::ostream* out_;
    std::chrono::steady_clock::time_point start_;
};

struct Prepared {
    data::Dataset data;
    train::DataSplit split;
    std::map<std::string, std::size_t> global;  // heldout label -> index
    std::vector<std::string> labels;
};

Prepared prepare(const ExperimentConfig& cfg) {
    Prepared p;
    p.data = train::load_dataset(cfg.train);
    validate(cfg, p.data);
    p.split = train::split_classes(p.data, cfg.train.split.heldout_classes_per_modality, cfg.train.seed);
    for (const auto& label : p.split.heldout.classes()) {
        p.global.emplace(label, p.labels.size());
        p.labels.push_back(label);
    }
    return p;
}

train::StageReport stage1(train::TrainState& st, const Prepared& p, const train::TrainConfig& tc, bool augment,
                          train::TrainLog& log, std::uint64_t seed) {
    auto s1 = tc.stages[0];
    s1.augment = s1.augment || augment;
    return train::run_stage1(st, p.split.pretrain, s1, log, stage_seed(seed, 1));
}

train::Stage4Report stage4(train::TrainState& st, const Prepared& p, const train::TrainConfig& tc, bool augment,
                           std::span<const data::Episode> eps, train::TrainLog& log, std::uint64_t seed) {
    auto s4 = tc.stages[3];
    s4.augment = s4.augment || augment;
    return train::run_stage4(st, p.split.heldout, eps, s4, tc.adapters, log, stage_seed(seed, 4));
}

// Stages 2-3 of the curriculum-masking pipeline.
void stages23(train::TrainState& st, const Prepared& p, const train::TrainConfig& tc,
              const train::CurriculumSchedule& schedule, train::TrainLog& log, std::uint64_t seed) {
    train::run_stage2(st, p.split.pretrain, tc.stages[1], schedule, tc.adapters, log, stage_seed(seed, 2));
    bool any_description = false;
    for (const auto& s : p.split.pretrain.samples()) {
        any_description = any_description || s.description.has_value();
    }
    if (any_description) {
        train::run_stage3(st, p.split.pretrain, tc.stages[2], tc.adapters, log, stage_seed(seed, 3));
    } else {
        log.write({{"kind", "skip"}, {"stage", 3}, {"reason", "no samples with descriptions"}});
    }
}

std::string format_value(double v) { return fmt::format("{:g}", v); }

}  // namespace

std::string_view arm_name(Arm arm) {
    switch (arm) {
    case Arm::ours_curriculum_masking:
        return "ours_curriculum_masking";
    case Arm::direct_finetune:
        return "direct_finetune";
    case Arm::data_augmentation:
        return "data_augmentation";
    case Arm::protonet_baseline:
        return "protonet_baseline";
    }
    return "?";
}

Arm parse_arm(std::string_view name) {
    for (auto a : kAllArms) {
        if (arm_name(a) == name) {
            return a;
        }
    }
    fail(ErrorKind::validation, fmt::format("unknown arm \"{}\" (expected one of ours_curriculum_masking, "
                                            "direct_finetune, data_augmentation, protonet_baseline)",
                                            name));
}

std::span<const ReferenceRow> published_reference_rows() { return kReference; }

ordered_json to_json(const MetricsReport& r) {
    ordered_json per_class = ordered_json::array();
    for (const auto& c : r.per_class) {
        per_class.push_back({{"label", c.label},
                             {"precision", c.scores.precision},
                             {"recall", c.scores.recall},
                             {"f1", c.scores.f1},
                             {"support", c.scores.support}});
    }
    ordered_json j{{"experiment_id", r.experiment_id}, {"arm", r.arm}, {"micro_f1", r.micro_f1},
                   {"accuracy", r.accuracy}};
    j["control_micro_f1"] = r.control_micro_f1 ? ordered_json(*r.control_micro_f1) : ordered_json(nullptr);
    j["n_episodes"] = r.n_episodes;
    j["n_queries"] = r.n_queries;
    j["seeds"] = r.seeds;
    j["config_hash"] = r.config_hash;
    j["query_stream_hash"] = r.query_stream_hash;
    if (r.cell) {
        j["cell"] = *r.cell;
    }
    j["per_class"] = per_class;
    return j;
}

MetricsReport metrics_report_from_json(const json& j) {
    MetricsReport r;
    try {
        r.experiment_id = j.at("experiment_id").get<std::string>();
        r.arm = j.at("arm").get<std::string>();
        r.micro_f1 = j.at("micro_f1").get<double>();
        r.accuracy = j.at("accuracy").get<double>();
        if (!j.at("control_micro_f1").is_null()) {
            r.control_micro_f1 = j.at("control_micro_f1").get<double>();
        }
        r.n_episodes = j.at("n_episodes").get<std::size_t>();
        r.n_queries = j.at("n_queries").get<std::size_t>();
        r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.query_stream_hash = j.at("query_stream_hash").get<std::string>();
        if (j.contains("cell")) {
            r.cell = j.at("cell");
        }
        for (const auto& c : j.at("per_class")) {
            r.per_class.push_back({c.at("label").get<std::string>(),
                                   {c.at("precision").get<double>(), c.at("recall").get<double>(),
                                    c.at("f1").get<double>(), c.at("support").get<std::size_t>()}});
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::parse, fmt::format("metrics report: {}", e.what()));
    }
    return r;
}

ExperimentConfig experiment_config_from_json(const json& j) {
    reject_unknown_keys(j, {"id", "train", "baseline", "arms", "seeds"}, "experiment config");
    ExperimentConfig cfg;
    try {
        cfg.id = j.value("id", cfg.id);
        if (j.contains("train")) {
            cfg.train = train::train_config_from_json(j.at("train"));
        }
        if (j.contains("baseline")) {
            cfg.baseline = baseline::baseline_config_from_json(j.at("baseline"));
        }
        if (j.contains("arms")) {
            cfg.arms.clear();
            for (const auto& a : j.at("arms")) {
                cfg.arms.push_back(parse_arm(a.get<std::string>()));
            }
        }
        if (j.contains("seeds")) {
            cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::configuration, fmt::format("experiment config: {}", e.what()));
    }
    return cfg;
}

json to_json(const ExperimentConfig& cfg) {
    json arms = json::array();
    for (auto a : cfg.arms) {
        arms.push_back(arm_name(a));
    }
    return {{"id", cfg.id},
            {"train", train::to_json(cfg.train)},
            {"baseline", baseline::to_json(cfg.baseline)},
            {"arms", arms},
            {"seeds", cfg.seeds}};
}

std::string config_hash(const ExperimentConfig& cfg) { return content_hash(to_json(cfg)); }

void validate(const ExperimentConfig& cfg, const data::Dataset& ds) {
    if (cfg.arms.empty()) {
        fail(ErrorKind::validation, "experiment names no arms");
    }
    if (std::set<Arm>(cfg.arms.begin(), cfg.arms.end()).size() != cfg.arms.size()) {
        fail(ErrorKind::validation, "experiment lists an arm twice");
    }
    if (cfg.seeds.empty() || std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size()) {
        fail(ErrorKind::validation, "experiment needs at least one seed and no duplicates");
    }
    train::validate(cfg.train);
    const auto& ep = cfg.train.eval.episode;
    if (cfg.train.eval.episodes == 0) {
        fail(ErrorKind::validation, "eval.episodes must be positive");
    }
    if (ep.n_way > cfg.train.split.heldout_classes_per_modality) {
        fail(ErrorKind::validation, fmt::format("{}-way evaluation needs at least {} held-out classes per modality "
                                                "(split holds out {})",
                                                ep.n_way, ep.n_way, cfg.train.split.heldout_classes_per_modality));
    }
    for (const auto& label : ds.classes()) {
        if (ds.members(label).size() < ep.k_shot + ep.q_query) {
            fail(ErrorKind::validation,
                 fmt::format("class \"{}\" has {} samples; {}-shot {}-query episodes need {}", label,
                             ds.members(label).size(), ep.k_shot, ep.q_query, ep.k_shot + ep.q_query));
        }
    }
    const bool needs_generation = std::find(cfg.arms.begin(), cfg.arms.end(), Arm::ours_curriculum_masking) !=
                                  cfg.arms.end();
    if (needs_generation && cfg.train.curriculum.phases.empty() && !cfg.train.stages[1].masking) {
        fail(ErrorKind::validation, "ours_curriculum_masking needs a curriculum or stage-2 masking");
    }
    if (cfg.baseline.epochs > 0 && cfg.baseline.train_episode.n_way < 2) {
        fail(ErrorKind::validation, "baseline training episodes need n_way >= 2");
    }
}

std::vector<data::Episode> evaluation_episodes(const data::Dataset& heldout, const train::EvalConfig& cfg,
                                               std::uint64_t seed) {
    std::map<Modality, std::vector<std::string>> pools;
    std::vector<Modality> order;
    for (const auto& label : heldout.classes()) {
        const auto mod = heldout.sample(heldout.members(label).front()).modality;
        if (!pools.contains(mod)) {
            order.push_back(mod);
        }
        pools[mod].push_back(label);
    }
    if (order.empty()) {
        fail(ErrorKind::validation, "no held-out classes to evaluate on");
    }
    std::vector<data::Episode> eps;
    for (std::size_t e = 0; e < cfg.episodes; ++e) {
        const auto mod = order[e % order.size()];
        eps.push_back(data::sample_episode(heldout, cfg.episode, mix_seed(seed, e), pools.at(mod)));
    }
    return eps;
}

std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
    const Prepared p = prepare(cfg);
    const std::string hash = config_hash(cfg);
    const auto& tc = cfg.train;
    Progress progress(opts.progress);
    std::map<Arm, Pooled> pooled;
    for (auto seed : cfg.seeds) {
        const auto eps = evaluation_episodes(p.split.heldout, tc.eval, stage_seed(seed, 5));
        std::optional<train::TrainState> plain_stage1;
        std::vector<std::string> reference_stream;
        for (auto arm : cfg.arms) {
            const std::string name = fmt::format("{}_seed{}", arm_name(arm), seed);
            auto log = open_log(opts, name);
            ArmRun run;
            switch (arm) {
            case Arm::ours_curriculum_masking:
            case Arm::direct_finetune: {
                if (!plain_stage1) {
                    plain_stage1 = train::fresh_state(tc.model, seed);
                    stage1(*plain_stage1, p, tc, false, *log, seed);
                    progress.note(fmt::format("seed {}: stage 1 done", seed));
                } else {
                    log->write({{"kind", "reuse"}, {"stage", 1}, {"note", "shared stage-1 checkpoint"}});
                }
                auto st = train::clone_state(*plain_stage1);
                if (arm == Arm::ours_curriculum_masking) {
                    stages23(st, p, tc, tc.curriculum, *log, seed);
                    progress.note(fmt::format("seed {}: stages 2-3 done", seed));
                }
                run = from_stage4(stage4(st, p, tc, false, eps, *log, seed));
                break;
            }
            case Arm::data_augmentation: {
                auto st = train::fresh_state(tc.model, seed);
                stage1(st, p, tc, true, *log, seed);
                run = from_stage4(stage4(st, p, tc, true, eps, *log, seed));
                break;
            }
            case Arm::protonet_baseline: {
                auto m = baseline::init_protonet(cfg.baseline.model, seed);
                const auto r = baseline::train_baseline(m, p.split.pretrain, p.split.heldout, eps, cfg.baseline,
                                                        stage_seed(seed, 6), &*log);
                run.preds = r.preds;
                run.golds = r.golds;
                for (const auto& ep : eps) {
                    run.query_ids.push_back(data::query_ids(p.split.heldout, ep));
                }
                break;
            }
            }
            std::vector<std::string> stream;
            for (const auto& q : run.query_ids) {
                stream.insert(stream.end(), q.begin(), q.end());
            }
            if (reference_stream.empty()) {
                reference_stream = stream;
            } else if (stream != reference_stream) {
                fail(ErrorKind::training, fmt::format("{} consumed a different query stream than {}", arm_name(arm),
                                                      arm_name(cfg.arms.front())));
            }
            pool_run(pooled[arm], run, eps, p.global);
            progress.note(fmt::format("seed {}: {} done", seed, arm_name(arm)));
        }
    }
    std::vector<MetricsReport> reports;
    for (auto arm : cfg.arms) {
        reports.push_back(make_report(cfg.id, arm_name(arm), pooled.at(arm), p.labels, cfg.seeds, hash));
    }
    if (opts.out_dir) {
        write_reports(reports, *opts.out_dir);
    }
    return reports;
}

MetricsReport evaluate_checkpoint(const train::TrainState& state, const ExperimentConfig& cfg, std::uint64_t seed,
                                  const RunOptions& opts) {
    const Prepared p = prepare(cfg);
    const auto eps = evaluation_episodes(p.split.heldout, cfg.train.eval, stage_seed(seed, 5));
    auto log = open_log(opts, fmt::format("checkpoint_seed{}", seed));
    auto st = train::clone_state(state);
    const auto run = from_stage4(stage4(st, p, cfg.train, false, eps, *log, seed));
    Pooled pooled;
    pool_run(pooled, run, eps, p.global);
    const std::uint64_t seeds[] = {seed};
    auto report = make_report(cfg.id, "checkpoint", pooled, p.labels, seeds, config_hash(cfg));
    if (opts.out_dir) {
        write_reports({&report, 1}, *opts.out_dir);
    }
    return report;
}

ordered_json train_stage(train::TrainState& state, const ExperimentConfig& cfg, int stage, std::uint64_t seed,
                         const RunOptions& opts) {
    if (stage < 1 || stage > 4) {
        fail(ErrorKind::usage, fmt::format("stage must be 1, 2, 3 or 4 (got {})", stage));
    }
    if (stage == 4) {
        const auto r = evaluate_checkpoint(state, cfg, seed, opts);
        return {{"stage", 4}, {"metrics", to_json(r)}};
    }
    const Prepared p = prepare(cfg);
    const auto& tc = cfg.train;
    auto log = open_log(opts, fmt::format("stage{}_seed{}", stage, seed));
    train::StageReport r;
    if (stage == 1) {
        r = stage1(state, p, tc, false, *log, seed);
    } else if (stage == 2) {
        r = train::run_stage2(state, p.split.pretrain, tc.stages[1], tc.curriculum, tc.adapters, *log,
                              stage_seed(seed, 2));
    } else {
        r = train::run_stage3(state, p.split.pretrain, tc.stages[2], tc.adapters, *log, stage_seed(seed, 3));
    }
    return {{"stage", r.stage},
            {"epoch_losses", r.epoch_losses},
            {"heldin", r.heldin},
            {"steps", r.step_losses.size()},
            {"trainable_scalars", r.trainable_scalars},
            {"total_scalars", r.total_scalars},
            {"lineage", state.lineage.stages}};
}

std::string summary_table(std::span<const MetricsReport> reports, bool with_reference) {
    std::string out = fmt::format("{:<26} {:>9} {:>9} {:>10} {:>9} {:>8}  {}\n", "arm", "micro-F1", "accuracy",
                                  "zero-shot", "episodes", "queries", "cell");
    for (const auto& r : reports) {
        std::string cell;
        if (r.cell) {
            cell = fmt::format("{}={}", r.cell->at("axis").get<std::string>(), format_value(r.cell->at("value")));
        }
        out += fmt::format("{:<26} {:>9.4f} {:>9.4f} {:>10} {:>9} {:>8}  {}\n", r.arm, r.micro_f1, r.accuracy,
                           r.control_micro_f1 ? fmt::format("{:.4f}", *r.control_micro_f1) : "-", r.n_episodes,
                           r.n_queries, cell);
    }
    if (!reports.empty()) {
        out += fmt::format("experiment {}  config {}  seeds [{}]\n", reports.front().experiment_id,
                           reports.front().config_hash, fmt::join(reports.front().seeds, ", "));
    }
    if (with_reference) {
        out += fmt::format("\nreference ({}):\n", kReferenceLabel);
        for (const auto& row : kReference) {
            out += fmt::format("{:<26} {:>9.2f}\n", row.arm, row.micro_f1);
        }
        out += fmt::format("{:<26} {:>9.2f}  (masking ratio {})\n", "ours, best masking ratio", kPublishedBestRatioMicroF1,
                           kPublishedBestRatio);
    }
    return out;
}

void write_reports(std::span<const MetricsReport> reports, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream jsonl(dir / "reports.jsonl", std::ios::trunc);
    for (const auto& r : reports) {
        jsonl << to_json(r).dump() << '\n';
    }
    std::ofstream summary(dir / "summary.txt", std::ios::trunc);
    summary << summary_table(reports);
    if (!jsonl || !summary) {
        fail(ErrorKind::io, fmt::format("cannot write reports under {}", dir.string()));
    }
}

std::vector<MetricsReport> read_reports(const fs::path& dir) {
    const auto path = dir / "reports.jsonl";
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, fmt::format("cannot read {}", path.string()));
    }
    std::vector<MetricsReport> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(metrics_report_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
            fail(ErrorKind::parse, fmt::format("{}:{}: {}", path.string(), n, e.what()));
        }
    }
    return out;
}

std::string_view axis_name(Axis axis) {
    switch (axis) {
    case Axis::masking_applications:
        return "masking_applications";
    case Axis::masking_ratio:
        return "masking_ratio";
    case Axis::lora_rank:
        return "lora_rank";
    }
    return "?";
}

Axis parse_axis(std::string_view name) {
    for (auto a : {Axis::masking_applications, Axis::masking_ratio, Axis::lora_rank}) {
        if (axis_name(a) == name) {
            return a;
        }
    }
    fail(ErrorKind::validation,
         fmt::format("unknown ablation axis \"{}\" (expected masking_applications, masking_ratio or lora_rank)", name));
}

std::vector<double> default_axis_values(Axis axis) {
    switch (axis) {
    case Axis::masking_applications:
        return {1, 5, 10, 50, 100};
    case Axis::masking_ratio:
        return {0.05, 0.1, 0.25, 0.5, 0.75};
    case Axis::lora_rank:
        return {4, 16, 64};
    }
    return {};
}

AblationConfig ablation_config_from_json(const json& j) {
    reject_unknown_keys(j, {"base", "axis", "values"}, "ablation config");
    AblationConfig cfg;
    try {
        if (j.contains("base")) {
            cfg.base = experiment_config_from_json(j.at("base"));
        }
        cfg.axis = parse_axis(j.at("axis").get<std::string>());
        if (j.contains("values")) {
            cfg.values = j.at("values").get<std::vector<double>>();
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::configuration, fmt::format("ablation config: {}", e.what()));
    }
    return cfg;
}

Trend trend_of(std::span<const double> values, std::span<const double> scores) {
    Trend t;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        t.increases += scores[i] > scores[i - 1];
        t.decreases += scores[i] < scores[i - 1];
    }
    t.monotone_nondecreasing = t.decreases == 0;
    t.monotone_nonincreasing = t.increases == 0;
    if (!scores.empty()) {
        const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
        t.best_value = values[best];
        t.best_micro_f1 = scores[best];
    }
    return t;
}

std::string trend_summary(const AblationResult& r) {
    const auto& t = r.trend;
    std::string out = fmt::format(
        "{}: {} increases, {} decreases over {} values; monotone nondecreasing: {}; monotone nonincreasing: {}; "
        "best micro-F1 {:.4f} at {}",
        axis_name(r.axis), t.increases, t.decreases, r.values.size(), t.monotone_nondecreasing ? "yes" : "no",
        t.monotone_nonincreasing ? "yes" : "no", t.best_micro_f1, format_value(t.best_value));
    if (r.axis == Axis::masking_applications) {
        out += "\n  published trend: micro-F1 rises steadily from 1 to 100 applications (" +
               std::string(kReferenceLabel) + "; trend depends on model scale)";
    } else if (r.axis == Axis::masking_ratio) {
        out += fmt::format("\n  published optimum: ratio {} with micro-F1 ~{:.2f} ({})", kPublishedBestRatio,
                           kPublishedBestRatioMicroF1, kReferenceLabel);
    } else {
        out += "\n  published setting: rank 16";
    }
    return out;
}

AblationResult run_ablation(const AblationConfig& cfg, const RunOptions& opts) {
    AblationResult result;
    result.axis = cfg.axis;
    result.values = cfg.values.empty() ? default_axis_values(cfg.axis) : cfg.values;
    if (result.values.empty()) {
        fail(ErrorKind::validation, "ablation needs at least one value");
    }
    for (std::size_t i = 0; i < result.values.size(); ++i) {
        const double v = result.values[i];
        if (i > 0 && !(v > result.values[i - 1])) {
            fail(ErrorKind::validation, "ablation values must be strictly ascending");
        }
        const bool integral = v == std::floor(v);
        if (cfg.axis == Axis::masking_ratio ? !(v >= 0.0 && v <= 1.0) : !(integral && v >= 1.0)) {
            fail(ErrorKind::validation, fmt::format("{} value {} is out of range", axis_name(cfg.axis), v));
        }
    }
    ExperimentConfig base = cfg.base;
    base.arms = {Arm::ours_curriculum_masking};
    const Prepared p = prepare(base);
    Progress progress(opts.progress);

    // One configuration per cell.
    std::vector<train::TrainConfig> cells;
    std::vector<train::CurriculumSchedule> schedules;
    const auto& s2 = base.train.stages[1];
    const auto masking = s2.masking.value_or(train::MaskingConfig{});
    for (double v : result.values) {
        auto tc = base.train;
        train::CurriculumSchedule sched = tc.curriculum;
        switch (cfg.axis) {
        case Axis::masking_applications:
            sched.phases = {{s2.n_way, masking.ratio, static_cast<std::size_t>(v), s2.epochs}};
            break;
        case Axis::masking_ratio:
            sched.phases = {{s2.n_way, v, masking.applications_per_sample, s2.epochs}};
            break;
        case Axis::lora_rank:
            tc.adapters.rank = static_cast<std::size_t>(v);
            break;
        }
        tc.curriculum = sched;
        train::validate(tc);
        cells.push_back(tc);
        schedules.push_back(sched);
    }

    std::vector<Pooled> pooled(cells.size());
    for (auto seed : base.seeds) {
        const auto eps = evaluation_episodes(p.split.heldout, base.train.eval, stage_seed(seed, 5));
        auto shared_log = open_log(opts, fmt::format("{}_stage1_seed{}", axis_name(cfg.axis), seed));
        auto st1 = train::fresh_state(base.train.model, seed);
        stage1(st1, p, base.train, false, *shared_log, seed);
        progress.note(fmt::format("seed {}: shared stage 1 done", seed));
        for (std::size_t c = 0; c < cells.size(); ++c) {
            auto log = open_log(opts, fmt::format("{}_{}_seed{}", axis_name(cfg.axis), format_value(result.values[c]),
                                                  seed));
            auto st = train::clone_state(st1);
            stages23(st, p, cells[c], schedules[c], *log, seed);
            const auto run = from_stage4(stage4(st, p, cells[c], false, eps, *log, seed));
            pool_run(pooled[c], run, eps, p.global);
            progress.note(fmt::format("seed {}: {}={} done", seed, axis_name(cfg.axis), format_value(result.values[c])));
        }
    }

    std::vector<double> scores;
    result.plot_data = fmt::format("# axis {}\n# {} micro_f1 accuracy zero_shot_micro_f1 queries\n",
                                   axis_name(cfg.axis), axis_name(cfg.axis));
    for (std::size_t c = 0; c < cells.size(); ++c) {
        ExperimentConfig cell_cfg = base;
        cell_cfg.train = cells[c];
        auto r = make_report(base.id + "/" + std::string(axis_name(cfg.axis)), arm_name(Arm::ours_curriculum_masking),
                             pooled[c], p.labels, base.seeds, config_hash(cell_cfg));
        r.cell = json{{"axis", axis_name(cfg.axis)}, {"value", result.values[c]}};
        scores.push_back(r.micro_f1);
        result.plot_data += fmt::format("{} {:.6f} {:.6f} {:.6f} {}\n", format_value(result.values[c]), r.micro_f1,
                                        r.accuracy, r.control_micro_f1.value_or(0.0), r.n_queries);
        result.reports.push_back(std::move(r));
    }
    result.trend = trend_of(result.values, scores);
    if (opts.out_dir) {
        write_reports(result.reports, *opts.out_dir);
        std::ofstream(*opts.out_dir / fmt::format("ablation_{}.dat", axis_name(cfg.axis))) << result.plot_data;
        std::ofstream(*opts.out_dir / fmt::format("ablation_{}_trend.txt", axis_name(cfg.axis)))
            << trend_summary(result) << '\n';
    }
    return result;
}

}  // namespace m3f::eval
