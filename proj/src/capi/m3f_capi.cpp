#include "m3f/m3f.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <map>
#include <new>
#include <string>

#include "common/error.hpp"
#include "data/episode.hpp"
#include "data/generator.hpp"
#include "data/prompt.hpp"
#include "data/records.hpp"
#include "decoder/decoder.hpp"
#include "eval/harness.hpp"
#include "model/model.hpp"
#include "train/checkpoint.hpp"

struct m3f_dataset {
    m3f::data::Dataset ds;
    std::vector<std::string> warnings;
};

struct m3f_model {
    m3f::train::TrainState state;
};

namespace {

using namespace m3f;

thread_local std::string g_last_error;

m3f_status status_of(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::dimension: return M3F_ERR_DIMENSION;
    case ErrorKind::validation: return M3F_ERR_VALIDATION;
    case ErrorKind::parse: return M3F_ERR_PARSE;
    case ErrorKind::usage: return M3F_ERR_USAGE;
    case ErrorKind::configuration: return M3F_ERR_CONFIGURATION;
    case ErrorKind::episode: return M3F_ERR_EPISODE;
    case ErrorKind::template_error: return M3F_ERR_TEMPLATE;
    case ErrorKind::length: return M3F_ERR_LENGTH;
    case ErrorKind::training: return M3F_ERR_TRAINING;
    case ErrorKind::io: return M3F_ERR_IO;
    }
    return M3F_ERR_INTERNAL;
}

struct ArgumentError {
    const char* what;
};

template <class T>
T* need(T* p, const char* what) {
    if (p == nullptr) {
        throw ArgumentError{what};
    }
    return p;
}

template <class F>
m3f_status guarded(F&& body) {
    g_last_error.clear();
    try {
        body();
        return M3F_OK;
    } catch (const ArgumentError& e) {
        g_last_error = std::string(e.what) + " must not be null";
        return M3F_ERR_ARGUMENT;
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const json::exception& e) {
        g_last_error = std::string("parse error: ") + e.what();
        return M3F_ERR_PARSE;
    } catch (const std::filesystem::filesystem_error& e) {
        g_last_error = std::string("io error: ") + e.what();
        return M3F_ERR_IO;
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return M3F_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = std::string("internal error: ") + e.what();
        return M3F_ERR_INTERNAL;
    }
}

void hand_out(char** out, const std::string& s) {
    auto* p = static_cast<char*>(std::malloc(s.size() + 1));
    if (p == nullptr) {
        throw std::bad_alloc();
    }
    std::memcpy(p, s.c_str(), s.size() + 1);
    *out = p;
}

json parse_json(const char* text, const char* what) {
    need(text, what);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::parse, std::string(what) + ": " + e.what());
    }
}

eval::ExperimentConfig experiment(const char* text) {
    return eval::experiment_config_from_json(parse_json(text, "experiment_json"));
}

eval::RunOptions options(const char* out_dir, bool progress) {
    eval::RunOptions o;
    if (out_dir != nullptr) {
        o.out_dir = std::filesystem::path(out_dir);
    }
    if (progress) {
        o.progress = &std::cerr;
    }
    return o;
}

ordered_json report_array(std::span<const eval::MetricsReport> reports) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : reports) {
        arr.push_back(eval::to_json(r));
    }
    return arr;
}

}  // namespace

extern "C" {

const char* m3f_version(void) { return "0.1.0"; }

const char* m3f_status_name(m3f_status status) {
    switch (status) {
    case M3F_OK: return "ok";
    case M3F_ERR_DIMENSION: return "dimension";
    case M3F_ERR_VALIDATION: return "validation";
    case M3F_ERR_PARSE: return "parse";
    case M3F_ERR_USAGE: return "usage";
    case M3F_ERR_CONFIGURATION: return "configuration";
    case M3F_ERR_EPISODE: return "episode";
    case M3F_ERR_TEMPLATE: return "template";
    case M3F_ERR_LENGTH: return "length";
    case M3F_ERR_TRAINING: return "training";
    case M3F_ERR_IO: return "io";
    case M3F_ERR_ARGUMENT: return "argument";
    case M3F_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* m3f_last_error(void) { return g_last_error.c_str(); }

void m3f_string_free(char* s) { std::free(s); }

m3f_status m3f_default_config(char** out_json) {
    return guarded([&] { hand_out(need(out_json, "out_json"), eval::to_json(eval::ExperimentConfig{}).dump(2)); });
}

m3f_status m3f_validate_config(const char* experiment_json, char** out_json) {
    return guarded([&] {
        need(out_json, "out_json");
        const auto cfg = experiment(experiment_json);
        eval::validate(cfg, train::load_dataset(cfg.train));
        hand_out(out_json, eval::to_json(cfg).dump(2));
    });
}

m3f_status m3f_dataset_generate(const char* spec_json, m3f_dataset** out) {
    return guarded([&] {
        need(out, "out");
        const auto spec = data::generator_spec_from_json(parse_json(spec_json, "spec_json"));
        *out = new m3f_dataset{data::generate_synthetic(spec), {}};
    });
}

m3f_status m3f_dataset_load(const char* path, m3f_dataset** out) {
    return guarded([&] {
        need(out, "out");
        auto loaded = data::read_records(need(path, "path"));
        *out = new m3f_dataset{std::move(loaded.dataset), std::move(loaded.warnings)};
    });
}

m3f_status m3f_dataset_from_config(const char* experiment_json, m3f_dataset** out) {
    return guarded([&] {
        need(out, "out");
        const auto cfg = experiment(experiment_json);
        auto ds = train::load_dataset(cfg.train);
        auto warnings = ds.class_size_warnings();
        *out = new m3f_dataset{std::move(ds), std::move(warnings)};
    });
}

m3f_status m3f_dataset_save(const m3f_dataset* ds, const char* dir) {
    return guarded([&] { data::write_records(need(ds, "dataset")->ds, need(dir, "dir")); });
}

m3f_status m3f_dataset_describe(const m3f_dataset* ds, char** out_json) {
    return guarded([&] {
        need(ds, "dataset");
        need(out_json, "out_json");
        std::map<std::string, std::pair<std::size_t, std::size_t>> per_mod;  // samples, classes
        std::size_t described = 0;
        for (const auto& label : ds->ds.classes()) {
            const auto& first = ds->ds.sample(ds->ds.members(label).front());
            auto& [n, c] = per_mod[std::string(data::to_string(first.modality))];
            n += ds->ds.members(label).size();
            ++c;
        }
        for (const auto& s : ds->ds.samples()) {
            described += s.description.has_value() ? 1 : 0;
        }
        ordered_json mods = ordered_json::object();
        for (const auto& [m, nc] : per_mod) {
            mods[m] = {{"samples", nc.first}, {"classes", nc.second}};
        }
        auto warnings = ds->warnings;
        for (auto& w : ds->ds.class_size_warnings()) {
            if (std::find(warnings.begin(), warnings.end(), w) == warnings.end()) {
                warnings.push_back(std::move(w));
            }
        }
        const ordered_json j{{"samples", ds->ds.size()},
                             {"classes", ds->ds.classes().size()},
                             {"described", described},
                             {"modalities", mods},
                             {"warnings", warnings},
                             {"fingerprint", data::fingerprint(ds->ds)}};
        hand_out(out_json, j.dump(2));
    });
}

m3f_status m3f_dataset_sample_episodes(const m3f_dataset* ds, const char* params_json, size_t count, uint64_t seed,
                                       char** out_json) {
    return guarded([&] {
        need(ds, "dataset");
        need(out_json, "out_json");
        const auto j = parse_json(params_json, "params_json");
        reject_unknown_keys(j, {"n_way", "k_shot", "q_query"}, "episode params");
        data::EpisodeParams params;
        params.n_way = get_size(j, "n_way", params.n_way);
        params.k_shot = get_size(j, "k_shot", params.k_shot);
        params.q_query = get_size(j, "q_query", params.q_query);
        json arr = json::array();
        for (std::size_t i = 0; i < count; ++i) {
            arr.push_back(data::episode_to_json(ds->ds, data::sample_episode(ds->ds, params, mix_seed(seed, i))));
        }
        hand_out(out_json, arr.dump());
    });
}

void m3f_dataset_free(m3f_dataset* ds) { delete ds; }

m3f_status m3f_model_init(const char* experiment_json, uint64_t seed, m3f_model** out) {
    return guarded([&] {
        need(out, "out");
        const auto cfg = experiment(experiment_json);
        *out = new m3f_model{train::fresh_state(cfg.train.model, seed)};
    });
}

m3f_status m3f_model_load(const char* dir, m3f_model** out) {
    return guarded([&] {
        need(out, "out");
        *out = new m3f_model{train::load_checkpoint(need(dir, "dir"))};
    });
}

m3f_status m3f_model_save(const m3f_model* model, const char* dir) {
    return guarded([&] { train::save_checkpoint(need(model, "model")->state, need(dir, "dir")); });
}

m3f_status m3f_model_describe(const m3f_model* model, char** out_json) {
    return guarded([&] {
        need(model, "model");
        need(out_json, "out_json");
        const auto& st = model->state;
        ordered_json sets = ordered_json::array();
        for (const auto& s : st.adapter_sets) {
            sets.push_back({{"tag", s.tag},
                            {"rank", s.rank},
                            {"targets", s.targets.size()},
                            {"merged", s.merged},
                            {"parameters", s.parameter_count(st.model.params)}});
        }
        const ordered_json j{{"parameters", st.model.params.scalar_count()},
                             {"tensors", st.model.params.size()},
                             {"lineage", st.lineage.stages},
                             {"pretrain_classes", st.lineage.pretrain_classes.size()},
                             {"adapter_sets", sets},
                             {"config", model::to_json(st.model.config)}};
        hand_out(out_json, j.dump(2));
    });
}

m3f_status m3f_model_train_stage(m3f_model* model, const char* experiment_json, int stage, uint64_t seed,
                                 const char* out_dir, char** report_json) {
    return guarded([&] {
        need(model, "model");
        need(report_json, "report_json");
        const auto cfg = experiment(experiment_json);
        hand_out(report_json, eval::train_stage(model->state, cfg, stage, seed, options(out_dir, false)).dump(2));
    });
}

m3f_status m3f_model_generate(const m3f_model* model, const m3f_dataset* ds, const char* sample_id,
                              size_t max_new_tokens, char** out_text) {
    return guarded([&] {
        need(model, "model");
        need(ds, "dataset");
        need(out_text, "out_text");
        const auto idx = ds->ds.find(need(sample_id, "sample_id"));
        if (!idx) {
            fail(ErrorKind::validation, std::string("no sample with id \"") + sample_id + "\"");
        }
        const auto& s = ds->ds.sample(*idx);
        const auto& m = model->state.model;
        const auto prompt = decoder::tokenize_prompt(
            data::render_prompt(data::template_bank(data::TaskKind::generation)[0], s, {}));
        ad::Tape tape(false);
        const ad::Tensor media[] = {model::media_tokens(tape, m, s).tokens};
        const auto ids = decoder::generate_greedy(m.params, m.config.decoder, prompt, media, max_new_tokens);
        hand_out(out_text, decoder::render_output(ids));
    });
}

void m3f_model_free(m3f_model* model) { delete model; }

m3f_status m3f_evaluate(const m3f_model* model, const char* experiment_json, uint64_t seed, const char* out_dir,
                        char** report_json) {
    return guarded([&] {
        need(model, "model");
        need(report_json, "report_json");
        const auto cfg = experiment(experiment_json);
        const auto r = eval::evaluate_checkpoint(model->state, cfg, seed, options(out_dir, false));
        hand_out(report_json, eval::to_json(r).dump(2));
    });
}

m3f_status m3f_run_experiment(const char* experiment_json, const char* out_dir, int progress, char** reports_json) {
    return guarded([&] {
        need(reports_json, "reports_json");
        const auto cfg = experiment(experiment_json);
        const auto reports = eval::run_experiment(cfg, options(out_dir, progress != 0));
        hand_out(reports_json, report_array(reports).dump(2));
    });
}

m3f_status m3f_run_ablation(const char* ablation_json, const char* out_dir, int progress, char** result_json) {
    return guarded([&] {
        need(result_json, "result_json");
        const auto cfg = eval::ablation_config_from_json(parse_json(ablation_json, "ablation_json"));
        const auto r = eval::run_ablation(cfg, options(out_dir, progress != 0));
        const ordered_json j{{"axis", eval::axis_name(r.axis)},
                             {"values", r.values},
                             {"reports", report_array(r.reports)},
                             {"trend",
                              {{"increases", r.trend.increases},
                               {"decreases", r.trend.decreases},
                               {"monotone_nondecreasing", r.trend.monotone_nondecreasing},
                               {"monotone_nonincreasing", r.trend.monotone_nonincreasing},
                               {"best_value", r.trend.best_value},
                               {"best_micro_f1", r.trend.best_micro_f1}}},
                             {"trend_summary", eval::trend_summary(r)},
                             {"plot_data", r.plot_data}};
        hand_out(result_json, j.dump(2));
    });
}

m3f_status m3f_report_summary(const char* dir, char** out_text) {
    return guarded([&] {
        need(out_text, "out_text");
        const auto reports = eval::read_reports(need(dir, "dir"));
        hand_out(out_text, eval::summary_table(reports));
    });
}

}  // extern "C"
