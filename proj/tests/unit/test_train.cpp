#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "data/episode.hpp"
#include "data/generator.hpp"
#include "support/checks.hpp"
#include "support/sanity.hpp"
#include "train/config.hpp"
#include "train/stages.hpp"

using namespace m3f;
using data::Modality;
using m3f::testing::error_message;
using m3f::testing::throws_kind;

namespace {

model::ModelConfig small_config() {
    model::ModelConfig cfg;
    cfg.encoder.d_enc = 16;
    cfg.encoder.d_model = 16;
    cfg.encoder.table_hash_buckets = 16;
    cfg.decoder.d_model = 16;
    cfg.decoder.heads = 2;
    cfg.decoder.layers = 1;
    cfg.decoder.d_ff = 32;
    cfg.decoder.context = 256;
    return cfg;
}

data::Dataset small_data(std::size_t classes = 6, std::size_t per_class = 4, double descriptions = 0.5,
                         std::uint64_t seed = 11) {
    data::GeneratorSpec spec;
    spec.classes_per_modality = classes;
    spec.samples_per_class = per_class;
    spec.class_separation = 5.0;
    spec.description_fraction = descriptions;
    spec.seed = seed;
    return data::generate_synthetic(spec);
}

train::StageConfig quick_stage(int stage, std::size_t epochs = 1) {
    train::StageConfig s;
    s.stage = stage;
    s.epochs = epochs;
    s.batch_size = 4;
    s.lr = 1e-3f;
    s.use_adapters = stage != 1;
    s.n_way = 3;
    s.steps = 4;
    return s;
}

train::AdapterConfig small_adapters() {
    train::AdapterConfig a;
    a.rank = 4;
    return a;
}

std::vector<double> losses_of(const train::TrainLog& log) {
    std::vector<double> out;
    for (const auto& r : log.records()) {
        if (r.at("kind") == "step") {
            out.push_back(r.at("loss").get<double>());
        }
    }
    return out;
}

std::string dump_log(const train::TrainLog& log) {
    std::string out;
    for (const auto& r : log.records()) {
        out += r.dump() + "\n";
    }
    return out;
}

std::vector<float> copy_values(const ad::Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("adam: quadratic bowl converges within 200 steps at lr 0.05") {
    model::ParamStore store;
    Rng rng(1);
    auto& x = store.add("x", ad::Tensor::from({5}, {1.0f, -0.5f, 0.25f, 0.8f, -0.9f}, true));
    train::OptimizerState opt;
    opt.config.lr = 0.05f;
    double norm = 0.0;
    for (int step = 0; step < 200; ++step) {
        store.zero_grads();
        auto g = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] = 2.0f * x.values()[i];
        }
        train::optimize_step(store, {"x"}, opt);
        norm = 0.0;
        for (float v : x.values()) {
            norm += static_cast<double>(v) * v;
        }
        norm = std::sqrt(norm);
    }
    CHECK(norm < 1e-3);
    CHECK(opt.step == 200);
    CHECK(opt.moments.at("x").m.size() == 5);
}

TEST_CASE("adam: gradients of norm 10 are clipped to norm 1") {
    model::ParamStore store;
    auto& a = store.add("a", ad::Tensor::zeros({2}, true));
    auto& b = store.add("b", ad::Tensor::zeros({1}, true));
    a.mutable_grad()[0] = 6.0f;
    b.mutable_grad()[0] = 8.0f;
    train::OptimizerState opt;
    const auto report = train::optimize_step(store, {"a", "b"}, opt);
    CHECK(report.grad_norm == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(std::abs(report.grad_norm * report.clip_scale - 1.0) < 1e-6);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged; non-finite gradient names the parameter") {
    model::ParamStore store;
    auto& w = store.add("w", ad::Tensor::from({3}, {0.1f, 0.2f, 0.3f}, true));
    const auto before = copy_values(w);
    train::OptimizerState opt;
    w.mutable_grad();
    train::optimize_step(store, {"w"}, opt);
    CHECK(copy_values(w) == before);

    w.mutable_grad()[1] = std::numeric_limits<float>::quiet_NaN();
    const auto msg = error_message([&] { train::optimize_step(store, {"w"}, opt); });
    CHECK(msg.find("parameter w") != std::string::npos);
    CHECK(copy_values(w) == before);
}

TEST_CASE("stage 1: single-batch overfit reaches loss below 1e-2 within 500 steps") {
    auto st = train::fresh_state(small_config(), 3);
    const auto ds = small_data();
    std::vector<data::Sample> batch{ds.samples().begin(), ds.samples().begin() + 4};
    const std::vector<std::string> options{ds.classes().begin(), ds.classes().begin() + 3};
    const auto run = testing::overfit_labels(st, batch, options, 500, 3e-3f);
    CAPTURE(run.losses.back());
    CHECK(run.reached);
}

TEST_CASE("stage 1: all parameters trainable, templates randomized, held-in loss decreases") {
    auto cfg = train::default_train_config();
    auto ds = data::generate_synthetic(cfg.data);
    const auto split = train::split_classes(ds, cfg.split.heldout_classes_per_modality, cfg.seed);
    auto st = train::fresh_state(cfg.model, cfg.seed);
    auto s1 = cfg.stages[0];
    s1.epochs = 3;
    train::TrainLog log;
    const auto report = train::run_stage1(st, split.pretrain, s1, log, cfg.seed);
    CHECK(report.trainable_scalars == report.total_scalars);
    REQUIRE(report.heldin.size() == 4);
    for (std::size_t e = 1; e < report.heldin.size(); ++e) {
        CAPTURE(e);
        CHECK(report.heldin[e] < report.heldin[e - 1]);
    }
    // Distinct templates per consecutive window of 100 samples.
    std::vector<std::string> seen;
    for (const auto& r : log.records()) {
        if (r.at("kind") == "step") {
            for (const auto& t : r.at("templates")) {
                seen.push_back(t.get<std::string>());
            }
        }
    }
    REQUIRE(seen.size() >= 100);
    for (std::size_t w = 0; w + 100 <= seen.size(); w += 100) {
        CHECK(std::set<std::string>(seen.begin() + w, seen.begin() + w + 100).size() >= 3);
    }
    CHECK(st.lineage.stages == std::vector<int>{1});
    CHECK(st.lineage.pretrain_classes.size() == 30);
}

TEST_CASE("stage 2: ratio 0 matches the no-masking control") {
    const auto ds = small_data();
    auto run = [&](std::optional<double> ratio) {
        auto st = train::fresh_state(small_config(), 4);
        train::TrainLog log;
        train::run_stage1(st, ds, quick_stage(1), log, 1);
        auto s2 = quick_stage(2, 2);
        if (ratio) {
            s2.masking = train::MaskingConfig{*ratio, 1};
        }
        train::TrainLog log2;
        train::run_stage2(st, ds, s2, {}, small_adapters(), log2, 2);
        return losses_of(log2);
    };
    const auto masked = run(0.0);
    const auto control = run(std::nullopt);
    REQUIRE(masked.size() == control.size());
    double gap = 0.0;
    for (std::size_t i = 0; i < masked.size(); ++i) {
        gap = std::max(gap, std::abs(masked[i] - control[i]));
    }
    CHECK(gap < 1e-6);
    CHECK(run(0.5) != control);
}

TEST_CASE("stage 2: curriculum validation and application sweep") {
    train::CurriculumSchedule bad{{{3, 0.05, 2, 1}, {2, 0.05, 2, 1}}};
    CHECK(throws_kind([&] { train::validate(bad); }, ErrorKind::validation));
    bad.phases = {{2, 0.05, 5, 1}, {3, 0.05, 1, 1}};
    CHECK(throws_kind([&] { train::validate(bad); }, ErrorKind::validation));

    const auto ds = small_data(3, 2);
    auto base = train::fresh_state(small_config(), 5);
    train::TrainLog log1;
    train::run_stage1(base, ds, quick_stage(1), log1, 1);
    auto st = base;
    train::TrainLog rejected;
    CHECK(throws_kind([&] { train::run_stage2(st, ds, quick_stage(2), bad, small_adapters(), rejected, 2); },
                      ErrorKind::validation));

    for (std::size_t apps : {1, 10, 100}) {
        CAPTURE(apps);
        auto copy = train::load_checkpoint([&] {
            const auto dir = std::filesystem::temp_directory_path() / "m3f_test_sweep";
            std::filesystem::remove_all(dir);
            train::save_checkpoint(base, dir);
            return dir;
        }());
        train::TrainLog log;
        const train::CurriculumSchedule sched{{{3, 0.05, apps, 1}}};
        train::run_stage2(copy, ds, quick_stage(2), sched, small_adapters(), log, 2);
        std::size_t steps = 0;
        for (const auto& r : log.records()) {
            if (r.at("kind") == "step") {
                CHECK(r.at("applications") == apps);
                CHECK(r.at("masked_ratio") == 0.05);
                CHECK(std::isfinite(r.at("loss").get<double>()));
                ++steps;
            }
        }
        CHECK(steps == 2);
    }
}

TEST_CASE("stage ordering follows the checkpoint lineage") {
    const auto ds = small_data();
    auto st = train::fresh_state(small_config(), 6);
    train::TrainLog log;
    CHECK(throws_kind([&] { train::run_stage2(st, ds, quick_stage(2), {}, small_adapters(), log, 1); },
                      ErrorKind::validation));
    CHECK(throws_kind([&] { train::run_stage3(st, ds, quick_stage(3), small_adapters(), log, 1); },
                      ErrorKind::validation));
    const auto ep = data::sample_episode(ds, {2, 1, 1}, 1);
    CHECK(throws_kind([&] { train::run_stage4(st, ds, {&ep, 1}, quick_stage(4), small_adapters(), log, 1); },
                      ErrorKind::validation));
    train::run_stage1(st, ds, quick_stage(1), log, 1);
    const auto msg = error_message([&] { train::run_stage3(st, ds, quick_stage(3), small_adapters(), log, 1); });
    CHECK(msg.find("stage 2") != std::string::npos);
}

TEST_CASE("stage 3: empty subset, frozen encoders, decreasing perplexity") {
    auto cfg = train::default_train_config();
    auto ds = data::generate_synthetic(cfg.data);
    const auto split = train::split_classes(ds, cfg.split.heldout_classes_per_modality, cfg.seed);
    auto st = train::fresh_state(cfg.model, cfg.seed);
    train::TrainLog log;
    auto s1 = cfg.stages[0];
    s1.epochs = 1;
    train::run_stage1(st, split.pretrain, s1, log, 1);
    auto s2 = cfg.stages[1];
    s2.epochs = 1;
    train::run_stage2(st, split.pretrain, s2, {}, cfg.adapters, log, 2);

    const auto no_desc = small_data(3, 2, 0.0);
    CHECK(throws_kind([&] { train::run_stage3(st, no_desc, cfg.stages[2], cfg.adapters, log, 3); },
                      ErrorKind::validation));

    std::vector<std::pair<std::string, std::vector<float>>> encoders;
    for (const auto& name : st.model.params.names()) {
        if (name.rfind("encoder.", 0) == 0 || name.rfind("special.", 0) == 0) {
            encoders.emplace_back(name, copy_values(st.model.params.get(name)));
        }
    }
    const auto report = train::run_stage3(st, split.pretrain, cfg.stages[2], cfg.adapters, log, 3);
    REQUIRE(report.heldin.size() == 3);
    CHECK(report.heldin[1] < report.heldin[0]);
    CHECK(report.heldin[2] < report.heldin[1]);
    for (const auto& [name, values] : encoders) {
        CAPTURE(name);
        CHECK(copy_values(st.model.params.get(name)) == values);
        CHECK_FALSE(st.model.params.get(name).requires_grad());
    }
    CHECK(st.lineage.stages == std::vector<int>{1, 2, 3});
}

TEST_CASE("stage 3: an overfit description is reproduced by greedy decoding") {
    const auto ds = small_data();
    const data::Sample* s = nullptr;
    for (const auto& x : ds.samples()) {
        if (x.description) {
            s = &x;
            break;
        }
    }
    REQUIRE(s != nullptr);
    auto st = train::fresh_state(small_config(), 7);
    const auto run = testing::overfit_description(st, *s, 500, 3e-3f, {adapters::Stage::knowledge, std::nullopt});
    CAPTURE(run.losses.back());
    CHECK(run.reached);
    CHECK(testing::greedy_description(st, *s) == *s->description);
}

TEST_CASE("stage 4: class overlap rejected; policy, control and restoration") {
    const auto ds = small_data(8, 6);
    const auto split = train::split_classes(ds, 3, 1);
    auto st = train::fresh_state(small_config(), 8);
    train::TrainLog log;
    train::run_stage1(st, split.pretrain, quick_stage(1), log, 1);

    const auto seen = data::sample_episode(split.pretrain, {2, 1, 1}, 1);
    const auto msg = error_message(
        [&] { train::run_stage4(st, split.pretrain, {&seen, 1}, quick_stage(4), small_adapters(), log, 1); });
    CHECK(msg.find("few-shot classes must be new") != std::string::npos);

    std::vector<std::vector<float>> before;
    for (const auto& name : st.model.params.names()) {
        before.push_back(copy_values(st.model.params.get(name)));
    }
    const auto names_before = st.model.params.names();
    std::vector<data::Episode> eps;
    for (std::uint64_t e = 0; e < 3; ++e) {
        eps.push_back(data::sample_episode(split.heldout, {3, 2, 1}, e));
    }
    auto s4 = quick_stage(4);
    s4.steps = 10;
    s4.lr = 3e-3f;
    const auto report = train::run_stage4(st, split.heldout, eps, s4, small_adapters(), log, 4);
    CHECK(report.episodes.size() == 3);
    CHECK(report.trainable_scalars < report.total_scalars);
    CHECK(st.model.params.adapters().empty());
    CHECK(st.model.params.names() == names_before);
    for (std::size_t i = 0; i < names_before.size(); ++i) {
        CAPTURE(names_before[i]);
        CHECK(copy_values(st.model.params.get(names_before[i])) == before[i]);
    }
    for (const auto& ep : report.episodes) {
        CHECK(ep.preds.size() == 3);
        CHECK(ep.control_preds.size() == 3);
        CHECK(ep.step_losses.size() == 10);
    }
}

TEST_CASE("stage 4: default dims freeze more than 90% of parameters and beat the zero-shot control") {
    auto cfg = train::default_train_config();
    const auto ds = data::generate_synthetic(cfg.data);
    const auto split = train::split_classes(ds, cfg.split.heldout_classes_per_modality, cfg.seed);
    auto st = train::fresh_state(cfg.model, cfg.seed);
    train::TrainLog log;
    auto s1 = cfg.stages[0];
    s1.epochs = 2;
    train::run_stage1(st, split.pretrain, s1, log, 1);
    std::vector<data::Episode> eps;
    for (std::uint64_t e = 0; e < 4; ++e) {
        eps.push_back(data::sample_episode(split.heldout, cfg.eval.episode, mix_seed(5, e)));
    }
    const auto report = train::run_stage4(st, split.heldout, eps, cfg.stages[3], cfg.adapters, log, 9);
    CAPTURE(report.frozen_fraction);
    CHECK(report.frozen_fraction > 0.9);
    CAPTURE(report.micro_f1);
    CAPTURE(report.control_micro_f1);
    CHECK(report.control_micro_f1 <= report.micro_f1);
}

TEST_CASE("training is bitwise deterministic for identical config and seed") {
    const auto ds = small_data();
    auto run = [&] {
        auto st = train::fresh_state(small_config(), 9);
        train::TrainLog log;
        train::run_stage1(st, ds, quick_stage(1, 2), log, 1);
        auto s2 = quick_stage(2);
        s2.augment = true;
        train::run_stage2(st, ds, s2, {{{3, 0.25, 2, 1}}}, small_adapters(), log, 2);
        train::run_stage3(st, ds, quick_stage(3), small_adapters(), log, 3);
        return dump_log(log);
    };
    const auto a = run();
    CHECK(a == run());
    CHECK(a.find("\"stage\":3") != std::string::npos);
}

TEST_CASE("non-finite values abort training with a diagnostic") {
    const auto ds = small_data();
    auto st = train::fresh_state(small_config(), 10);
    for (auto& v : st.model.params.get("special.tabular").mutable_values()) {
        v = std::numeric_limits<float>::infinity();
    }
    train::TrainLog log;
    const auto msg = error_message([&] { train::run_stage1(st, ds, quick_stage(1), log, 1); });
    CHECK(msg.find("non-finite") != std::string::npos);
    CHECK(throws_kind([&] { log.write({{"loss", std::nan("")}}); }, ErrorKind::training));
}

TEST_CASE("checkpoints round-trip bit-exactly with attached and merged adapters") {
    const auto ds = small_data();
    auto st = train::fresh_state(small_config(), 11);
    train::TrainLog log;
    train::run_stage1(st, ds, quick_stage(1), log, 1);
    train::run_stage2(st, ds, quick_stage(2), {}, small_adapters(), log, 2);
    const auto root = std::filesystem::temp_directory_path() / "m3f_test_ckpt";
    std::filesystem::remove_all(root);

    auto check_round_trip = [&](const train::TrainState& state, const std::string& sub) {
        train::save_checkpoint(state, root / sub);
        const auto loaded = train::load_checkpoint(root / sub);
        CHECK(loaded.model.params.names() == state.model.params.names());
        for (const auto& name : state.model.params.names()) {
            CAPTURE(name);
            CHECK(copy_values(loaded.model.params.get(name)) == copy_values(state.model.params.get(name)));
            CHECK(loaded.model.params.get(name).requires_grad() == state.model.params.get(name).requires_grad());
        }
        CHECK(loaded.model.params.adapters().size() == state.model.params.adapters().size());
        CHECK(loaded.lineage.stages == state.lineage.stages);
        CHECK(loaded.lineage.pretrain_classes == state.lineage.pretrain_classes);
        train::save_checkpoint(loaded, root / (sub + "_again"));
        for (const auto& entry : std::filesystem::directory_iterator(root / sub)) {
            CAPTURE(entry.path().filename());
            CHECK(file_bytes(entry.path()) == file_bytes(root / (sub + "_again") / entry.path().filename()));
        }
        const auto& s = ds.sample(0);
        const std::string opts[] = {ds.classes()[0], ds.classes()[1]};
        CHECK(train::predict_label(loaded, s, opts) == train::predict_label(state, s, opts));
    };
    check_round_trip(st, "attached");
    REQUIRE_FALSE(st.model.params.adapters().empty());
    adapters::merge(st.model.params, *st.adapter_set("base"));
    check_round_trip(st, "merged");
    std::filesystem::remove_all(root);
}

TEST_CASE("train config JSON is strict and round-trips") {
    const auto cfg = train::default_train_config();
    train::validate(cfg);
    const auto j = train::to_json(cfg);
    CHECK(train::to_json(train::train_config_from_json(j)) == j);

    auto extra = j;
    extra["stage2"]["momentum"] = 0.9;
    CHECK(throws_kind([&] { train::train_config_from_json(extra); }, ErrorKind::configuration));
    extra = j;
    extra["optimizer"] = "sgd";
    CHECK(throws_kind([&] { train::train_config_from_json(extra); }, ErrorKind::configuration));

    auto bad = cfg;
    bad.stages[2].masking = train::MaskingConfig{};
    CHECK(throws_kind([&] { train::validate(bad); }, ErrorKind::validation));
    bad = cfg;
    bad.curriculum.phases = {{5, 0.05, 2, 1}, {3, 0.05, 2, 1}};
    CHECK(throws_kind([&] { train::validate(bad); }, ErrorKind::validation));
}

TEST_CASE("class split holds out disjoint classes per modality") {
    const auto ds = small_data(8, 2);
    const auto split = train::split_classes(ds, 3, 1);
    CHECK(split.heldout.classes().size() == 3);
    CHECK(split.pretrain.classes().size() == 5);
    for (const auto& label : split.heldout.classes()) {
        CHECK_FALSE(split.pretrain.has_class(label));
    }
    CHECK(throws_kind([&] { train::split_classes(ds, 7, 1); }, ErrorKind::validation));
}
