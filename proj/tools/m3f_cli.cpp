// Command-line front end. Talks to the library only through m3f.h.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "m3f/m3f.h"

using json = nlohmann::json;

namespace {

struct Failure {
    m3f_status status;
};

void check(m3f_status s) {
    if (s != M3F_OK) {
        throw Failure{s};
    }
}

struct StrFree {
    void operator()(char* p) const { m3f_string_free(p); }
};
struct DatasetFree {
    void operator()(m3f_dataset* p) const { m3f_dataset_free(p); }
};
struct ModelFree {
    void operator()(m3f_model* p) const { m3f_model_free(p); }
};
using Dataset = std::unique_ptr<m3f_dataset, DatasetFree>;
using Model = std::unique_ptr<m3f_model, ModelFree>;

// Runs a call that hands back a string and returns it.
template <class F>
std::string text_of(F&& call) {
    char* raw = nullptr;
    check(call(&raw));
    std::unique_ptr<char, StrFree> owned(raw);
    return raw;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        std::cerr << "error: cannot read " << path << '\n';
        throw Failure{M3F_ERR_IO};
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::cerr << "error: " << what << " is not valid JSON: " << e.what() << '\n';
        throw Failure{M3F_ERR_PARSE};
    }
}

// Experiment configuration from a file, or the library default.
json experiment_config(const std::string& path) {
    if (path.empty()) {
        return parse(text_of([](char** o) { return m3f_default_config(o); }), "default config");
    }
    return parse(read_file(path), path);
}

Dataset dataset_from(const std::string& data_dir, const std::string& spec_path, std::optional<std::uint64_t> seed) {
    m3f_dataset* raw = nullptr;
    if (!data_dir.empty()) {
        check(m3f_dataset_load(data_dir.c_str(), &raw));
    } else {
        json spec = spec_path.empty() ? json::object() : parse(read_file(spec_path), spec_path);
        if (seed) {
            spec["seed"] = *seed;
        }
        check(m3f_dataset_generate(spec.dump().c_str(), &raw));
    }
    return Dataset(raw);
}

const char* dir_or_null(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"m3f: few-shot multimodal training and evaluation"};
    app.require_subcommand(1);

    std::string data_dir, spec_path, config_path, out_dir, checkpoint, sample_id, report_dir, axis;
    std::uint64_t seed = 0;
    int stage = 1;
    std::size_t n_way = 5, k_shot = 1, q_query = 1, count = 1, max_new = 256;
    std::vector<double> values;
    bool quiet = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset and write its records");
    gen->add_option("--spec", spec_path, "generator spec (JSON)");
    gen->add_option("--seed", seed, "overrides the generator seed");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* episodes = app.add_subcommand("sample-episodes", "print sampled episodes as JSON");
    episodes->add_option("--data", data_dir, "records file or directory");
    episodes->add_option("--spec", spec_path, "generator spec used when --data is absent");
    episodes->add_option("--seed", seed);
    episodes->add_option("--n-way", n_way);
    episodes->add_option("--k-shot", k_shot);
    episodes->add_option("--q-query", q_query);
    episodes->add_option("--count", count);

    auto* validate = app.add_subcommand("validate", "check a dataset or an experiment configuration");
    validate->add_option("--data", data_dir, "records file or directory");
    validate->add_option("--spec", spec_path, "generator spec");
    validate->add_option("--config", config_path, "experiment configuration");
    auto* validate_seed = validate->add_option("--seed", seed, "overrides the generator seed");

    auto* train = app.add_subcommand("train", "run one training stage and save the checkpoint");
    train->add_option("--stage", stage)->required()->check(CLI::Range(1, 4));
    train->add_option("--config", config_path, "experiment configuration");
    train->add_option("--seed", seed);
    train->add_option("--resume", checkpoint, "checkpoint to continue from");
    train->add_option("--out", out_dir, "checkpoint directory to write")->required();

    auto* evaluate = app.add_subcommand("eval", "few-shot evaluation of a checkpoint");
    evaluate->add_option("--checkpoint", checkpoint)->required();
    evaluate->add_option("--config", config_path, "experiment configuration");
    evaluate->add_option("--seed", seed);
    evaluate->add_option("--out", out_dir, "report directory");

    auto* experiment = app.add_subcommand("experiment", "run every configured arm on matched episodes");
    experiment->add_option("--config", config_path, "experiment configuration");
    experiment->add_option("--out", out_dir, "report directory");
    experiment->add_flag("--quiet", quiet, "no progress lines");

    auto* ablate = app.add_subcommand("ablate", "sweep one axis of the curriculum-masking arm");
    ablate->add_option("--axis", axis, "masking_applications, masking_ratio or lora_rank")->required();
    ablate->add_option("--config", config_path, "base experiment configuration");
    ablate->add_option("--values", values, "axis values (default: the standard grid)");
    ablate->add_option("--out", out_dir, "report directory");
    ablate->add_flag("--quiet", quiet, "no progress lines");

    auto* report = app.add_subcommand("report", "print the summary table of a report directory");
    report->add_option("--dir", report_dir)->required();

    auto* base = app.add_subcommand("baseline", "prototypical-network baseline alone");
    base->add_option("--suite", config_path, "experiment configuration")->required();
    base->add_option("--seed", seed);
    base->add_option("--out", out_dir, "report directory");

    auto* generate = app.add_subcommand("generate", "greedy description of one sample");
    generate->add_option("--checkpoint", checkpoint)->required();
    generate->add_option("--config", config_path, "experiment configuration naming the dataset");
    generate->add_option("--sample", sample_id, "sample id")->required();
    generate->add_option("--max-new", max_new);

    auto* config = app.add_subcommand("config", "print the default experiment configuration");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const auto ds = dataset_from("", spec_path, seed);
            check(m3f_dataset_save(ds.get(), out_dir.c_str()));
            std::cout << text_of([&](char** o) { return m3f_dataset_describe(ds.get(), o); }) << '\n';
        } else if (*episodes) {
            const auto ds = dataset_from(data_dir, spec_path, std::nullopt);
            const json params{{"n_way", n_way}, {"k_shot", k_shot}, {"q_query", q_query}};
            std::cout << text_of([&](char** o) {
                return m3f_dataset_sample_episodes(ds.get(), params.dump().c_str(), count, seed, o);
            }) << '\n';
        } else if (*validate) {
            if (!config_path.empty()) {
                const auto cfg = experiment_config(config_path).dump();
                std::cout << text_of([&](char** o) { return m3f_validate_config(cfg.c_str(), o); }) << '\n';
            } else {
                std::optional<std::uint64_t> s;
                if (validate_seed->count() > 0) {
                    s = seed;
                }
                const auto ds = dataset_from(data_dir, spec_path, s);
                std::cout << text_of([&](char** o) { return m3f_dataset_describe(ds.get(), o); }) << '\n';
            }
            std::cout << "valid\n";
        } else if (*train) {
            const auto cfg = experiment_config(config_path).dump();
            m3f_model* raw = nullptr;
            if (!checkpoint.empty()) {
                check(m3f_model_load(checkpoint.c_str(), &raw));
            } else {
                check(m3f_model_init(cfg.c_str(), seed, &raw));
            }
            Model model(raw);
            std::cout << text_of([&](char** o) {
                return m3f_model_train_stage(model.get(), cfg.c_str(), stage, seed, out_dir.c_str(), o);
            }) << '\n';
            check(m3f_model_save(model.get(), out_dir.c_str()));
        } else if (*evaluate) {
            const auto cfg = experiment_config(config_path).dump();
            m3f_model* raw = nullptr;
            check(m3f_model_load(checkpoint.c_str(), &raw));
            Model model(raw);
            std::cout << text_of([&](char** o) {
                return m3f_evaluate(model.get(), cfg.c_str(), seed, dir_or_null(out_dir), o);
            }) << '\n';
        } else if (*experiment) {
            const auto cfg = experiment_config(config_path).dump();
            text_of([&](char** o) { return m3f_run_experiment(cfg.c_str(), dir_or_null(out_dir), !quiet, o); });
            if (!out_dir.empty()) {
                std::cout << text_of([&](char** o) { return m3f_report_summary(out_dir.c_str(), o); });
            } else {
                std::cout << "done (pass --out to keep reports)\n";
            }
        } else if (*ablate) {
            json cfg{{"base", experiment_config(config_path)}, {"axis", axis}};
            if (!values.empty()) {
                cfg["values"] = values;
            }
            const auto result = parse(text_of([&](char** o) {
                return m3f_run_ablation(cfg.dump().c_str(), dir_or_null(out_dir), !quiet, o);
            }), "ablation result");
            std::cout << result.at("plot_data").get<std::string>() << result.at("trend_summary").get<std::string>()
                      << '\n';
        } else if (*report) {
            std::cout << text_of([&](char** o) { return m3f_report_summary(report_dir.c_str(), o); });
        } else if (*base) {
            auto cfg = experiment_config(config_path);
            cfg["arms"] = {"protonet_baseline"};
            cfg["seeds"] = {seed};
            const auto reports = parse(text_of([&](char** o) {
                return m3f_run_experiment(cfg.dump().c_str(), dir_or_null(out_dir), 0, o);
            }), "reports");
            for (const auto& r : reports) {
                std::cout << r.dump() << '\n';
            }
        } else if (*generate) {
            const auto cfg = experiment_config(config_path).dump();
            m3f_model* model_raw = nullptr;
            check(m3f_model_load(checkpoint.c_str(), &model_raw));
            Model model(model_raw);
            m3f_dataset* ds_raw = nullptr;
            check(m3f_dataset_from_config(cfg.c_str(), &ds_raw));
            Dataset ds(ds_raw);
            std::cout << text_of([&](char** o) {
                return m3f_model_generate(model.get(), ds.get(), sample_id.c_str(), max_new, o);
            }) << '\n';
        } else if (*config) {
            std::cout << text_of([](char** o) { return m3f_default_config(o); }) << '\n';
        }
    } catch (const Failure& f) {
        const char* msg = m3f_last_error();
        if (msg != nullptr && *msg != '\0') {
            std::cerr << "error: " << msg << '\n';
        }
        return static_cast<int>(f.status);
    }
    return 0;
}
