#include "train/config.hpp"

#include <fmt/format.h>

#include "common/error.hpp"
#include "data/records.hpp"

namespace m3f::train {

namespace {

StageConfig stage_from_json(const json& j, StageConfig s, const std::string& context) {
    reject_unknown_keys(j, {"epochs", "batch_size", "lr", "use_adapters", "masking", "n_way", "steps", "augment"},
                        context);
    s.epochs = get_size(j, "epochs", s.epochs);
    s.batch_size = get_size(j, "batch_size", s.batch_size);
    s.lr = j.value("lr", s.lr);
    s.use_adapters = j.value("use_adapters", s.use_adapters);
    s.n_way = get_size(j, "n_way", s.n_way);
    s.steps = get_size(j, "steps", s.steps);
    s.augment = j.value("augment", s.augment);
    if (j.contains("masking")) {
        const auto& m = j.at("masking");
        if (m.is_null()) {
            s.masking.reset();
        } else {
            reject_unknown_keys(m, {"ratio", "applications_per_sample"}, context + ".masking");
            MaskingConfig mc = s.masking.value_or(MaskingConfig{});
            mc.ratio = m.value("ratio", mc.ratio);
            mc.applications_per_sample = get_size(m, "applications_per_sample", mc.applications_per_sample);
            s.masking = mc;
        }
    }
    return s;
}

}  // namespace

void validate(const CurriculumSchedule& c) {
    for (std::size_t i = 0; i < c.phases.size(); ++i) {
        const auto& p = c.phases[i];
        if (p.epochs == 0 || p.applications == 0 || p.n_way < 2) {
            fail(ErrorKind::validation,
                 fmt::format("curriculum phase {} needs epochs >= 1, applications >= 1 and n_way >= 2", i));
        }
        if (!(p.ratio >= 0.0 && p.ratio <= 1.0)) {
            fail(ErrorKind::validation, fmt::format("curriculum phase {} ratio {} is outside [0, 1]", i, p.ratio));
        }
        if (i > 0) {
            const auto& prev = c.phases[i - 1];
            if (p.n_way < prev.n_way || p.applications < prev.applications) {
                fail(ErrorKind::validation,
                     fmt::format("curriculum phase {} (n_way {}, applications {}) is easier than phase {} "
                                 "(n_way {}, applications {}); difficulty must not decrease",
                                 i, p.n_way, p.applications, i - 1, prev.n_way, prev.applications));
            }
        }
    }
}

TrainConfig default_train_config() {
    TrainConfig cfg;
    cfg.data.modalities = {data::Modality::tabular};
    cfg.data.classes_per_modality = 40;
    cfg.data.samples_per_class = 10;
    cfg.data.class_separation = 5.0;
    cfg.split.heldout_classes_per_modality = 10;

    auto& s1 = cfg.stages[0];
    s1 = {};
    s1.stage = 1;
    s1.lr = 3e-4f;

    auto& s2 = cfg.stages[1];
    s2 = {};
    s2.stage = 2;
    s2.lr = 1e-3f;
    s2.use_adapters = true;
    s2.masking = MaskingConfig{};

    auto& s3 = cfg.stages[2];
    s3 = {};
    s3.stage = 3;
    s3.epochs = 3;
    s3.lr = 1e-3f;
    s3.use_adapters = true;

    auto& s4 = cfg.stages[3];
    s4 = {};
    s4.stage = 4;
    s4.epochs = 1;
    s4.lr = 3e-3f;
    s4.use_adapters = true;

    cfg.curriculum.phases = {{2, 0.05, 1, 1}, {3, 0.05, 1, 1}, {5, 0.05, 2, 3}};
    return cfg;
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown_keys(j, {"model", "data", "records", "split", "stage1", "stage2", "stage3", "stage4", "curriculum",
                            "adapters", "eval", "seed"},
                        "train config");
    TrainConfig cfg = default_train_config();
    try {
        if (j.contains("model")) {
            cfg.model = model::model_config_from_json(j.at("model"));
        }
        if (j.contains("data")) {
            cfg.data = data::generator_spec_from_json(j.at("data"));
        }
        if (j.contains("records")) {
            cfg.records = j.at("records").get<std::string>();
        }
        if (j.contains("split")) {
            reject_unknown_keys(j.at("split"), {"heldout_classes_per_modality"}, "split");
            cfg.split.heldout_classes_per_modality =
                get_size(j.at("split"), "heldout_classes_per_modality", cfg.split.heldout_classes_per_modality);
        }
        for (int k = 1; k <= 4; ++k) {
            const std::string key = fmt::format("stage{}", k);
            if (j.contains(key)) {
                cfg.stages[k - 1] = stage_from_json(j.at(key), cfg.stages[k - 1], key);
            }
        }
        if (j.contains("curriculum")) {
            const auto& c = j.at("curriculum");
            reject_unknown_keys(c, {"phases"}, "curriculum");
            cfg.curriculum.phases.clear();
            for (const auto& p : c.at("phases")) {
                reject_unknown_keys(p, {"n_way", "ratio", "applications", "epochs"}, "curriculum phase");
                CurriculumPhase phase;
                phase.n_way = get_size(p, "n_way", phase.n_way);
                phase.ratio = p.value("ratio", phase.ratio);
                phase.applications = get_size(p, "applications", phase.applications);
                phase.epochs = get_size(p, "epochs", phase.epochs);
                cfg.curriculum.phases.push_back(phase);
            }
        }
        if (j.contains("adapters")) {
            const auto& a = j.at("adapters");
            reject_unknown_keys(a, {"rank", "alpha", "share_across_stages"}, "adapters");
            cfg.adapters.rank = get_size(a, "rank", cfg.adapters.rank);
            cfg.adapters.alpha = a.value("alpha", cfg.adapters.alpha);
            cfg.adapters.share_across_stages = a.value("share_across_stages", cfg.adapters.share_across_stages);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            reject_unknown_keys(e, {"n_way", "k_shot", "q_query", "episodes"}, "eval");
            cfg.eval.episode.n_way = get_size(e, "n_way", cfg.eval.episode.n_way);
            cfg.eval.episode.k_shot = get_size(e, "k_shot", cfg.eval.episode.k_shot);
            cfg.eval.episode.q_query = get_size(e, "q_query", cfg.eval.episode.q_query);
            cfg.eval.episodes = get_size(e, "episodes", cfg.eval.episodes);
        }
        cfg.seed = j.value("seed", cfg.seed);
    } catch (const json::exception& e) {
        fail(ErrorKind::configuration, std::string("train config: ") + e.what());
    }
    validate(cfg);
    return cfg;
}

json to_json(const StageConfig& s) {
    ordered_json j{{"epochs", s.epochs},     {"batch_size", s.batch_size}, {"lr", s.lr},
                   {"use_adapters", s.use_adapters}, {"n_way", s.n_way}, {"steps", s.steps},
                   {"augment", s.augment}};
    if (s.masking) {
        j["masking"] = {{"ratio", s.masking->ratio}, {"applications_per_sample", s.masking->applications_per_sample}};
    }
    return j;
}

json to_json(const CurriculumSchedule& c) {
    json phases = json::array();
    for (const auto& p : c.phases) {
        phases.push_back({{"n_way", p.n_way}, {"ratio", p.ratio}, {"applications", p.applications},
                          {"epochs", p.epochs}});
    }
    return {{"phases", phases}};
}

json to_json(const TrainConfig& cfg) {
    json j{{"model", model::to_json(cfg.model)},
           {"data", data::to_json(cfg.data)},
           {"split", {{"heldout_classes_per_modality", cfg.split.heldout_classes_per_modality}}},
           {"curriculum", to_json(cfg.curriculum)},
           {"adapters",
            {{"rank", cfg.adapters.rank},
             {"alpha", cfg.adapters.alpha},
             {"share_across_stages", cfg.adapters.share_across_stages}}},
           {"eval",
            {{"n_way", cfg.eval.episode.n_way},
             {"k_shot", cfg.eval.episode.k_shot},
             {"q_query", cfg.eval.episode.q_query},
             {"episodes", cfg.eval.episodes}}},
           {"seed", cfg.seed}};
    for (int k = 1; k <= 4; ++k) {
        j[fmt::format("stage{}", k)] = to_json(cfg.stages[k - 1]);
    }
    if (cfg.records) {
        j["records"] = *cfg.records;
    }
    return j;
}

void validate(const TrainConfig& cfg) {
    for (int k = 1; k <= 4; ++k) {
        const auto& s = cfg.stages[k - 1];
        if (s.stage != k) {
            fail(ErrorKind::validation, fmt::format("stage{} config carries stage id {}", k, s.stage));
        }
        if (s.masking && k != 2) {
            fail(ErrorKind::validation, fmt::format("stage{}: masking is only defined for stage 2", k));
        }
        if (s.use_adapters != (k != 1)) {
            fail(ErrorKind::validation,
                 fmt::format("stage{}: use_adapters must be {}", k, k == 1 ? "false (full fine-tuning)" : "true"));
        }
        if (s.batch_size == 0) {
            fail(ErrorKind::validation, fmt::format("stage{}: batch_size must be positive", k));
        }
        if (!(s.lr > 0.0f)) {
            fail(ErrorKind::validation, fmt::format("stage{}: lr must be positive", k));
        }
        if (s.n_way < 2) {
            fail(ErrorKind::validation, fmt::format("stage{}: n_way must be at least 2", k));
        }
    }
    if (const auto& m = cfg.stages[1].masking; m && (!(m->ratio >= 0.0 && m->ratio <= 1.0) ||
                                                     m->applications_per_sample == 0)) {
        fail(ErrorKind::validation, "stage2.masking: ratio must lie in [0, 1] and applications be >= 1");
    }
    validate(cfg.curriculum);
    if (cfg.adapters.rank == 0) {
        fail(ErrorKind::validation, "adapters.rank must be at least 1");
    }
    const auto& e = cfg.eval.episode;
    if (e.k_shot == 0 || e.k_shot > data::kMaxPerClass || e.n_way < 2 || e.q_query == 0) {
        fail(ErrorKind::validation,
             fmt::format("eval: need n_way >= 2, 1 <= k_shot <= {} and q_query >= 1", data::kMaxPerClass));
    }
}

data::Dataset load_dataset(const TrainConfig& cfg) {
    if (cfg.records) {
        return data::read_records(*cfg.records).dataset;
    }
    return data::generate_synthetic(cfg.data);
}

}  // namespace m3f::train
