#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "common/rng.hpp"
#include "eval/harness.hpp"
#include "eval/metrics.hpp"
#include "support/checks.hpp"

using namespace m3f;
using m3f::testing::throws_kind;

namespace {

eval::ExperimentConfig tiny_experiment() {
    eval::ExperimentConfig cfg;
    cfg.id = "tiny";
    auto& t = cfg.train;
    t.model.encoder.d_enc = 16;
    t.model.encoder.d_model = 16;
    t.model.encoder.table_hash_buckets = 16;
    t.model.decoder.d_model = 16;
    t.model.decoder.heads = 2;
    t.model.decoder.layers = 1;
    t.model.decoder.d_ff = 32;
    t.model.decoder.context = 256;
    t.data.classes_per_modality = 7;
    t.data.samples_per_class = 4;
    t.data.description_fraction = 0.3;
    t.split.heldout_classes_per_modality = 3;
    for (auto& s : t.stages) {
        s.epochs = 1;
        s.batch_size = 4;
        s.n_way = 3;
        s.steps = 2;
        s.batch_size = 4;
    }
    t.curriculum.phases = {{2, 0.05, 1, 1}, {3, 0.05, 2, 1}};
    t.adapters.rank = 2;
    t.eval.episode = {3, 2, 1};
    t.eval.episodes = 4;
    cfg.baseline.model.width = 8;
    cfg.baseline.model.out = 8;
    cfg.baseline.train_episode = {3, 2, 2};
    cfg.baseline.episodes_per_epoch = 5;
    cfg.baseline.epochs = 1;
    return cfg;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("micro-F1 hand examples and errors") {
    const std::vector<std::size_t> p{0, 1, 1}, g{0, 1, 0};
    CHECK(eval::micro_f1(p, g, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(eval::micro_f1(g, g, 2) == 1.0);
    const std::vector<std::size_t> wrong{1, 0, 1};
    CHECK(eval::micro_f1(wrong, g, 2) == 0.0);
    CHECK(throws_kind([] { eval::micro_f1({}, {}, 2); }, ErrorKind::validation));
    CHECK(throws_kind([&] { eval::micro_f1(p, std::vector<std::size_t>{0, 1}, 2); }, ErrorKind::validation));
    CHECK(throws_kind([&] { eval::micro_f1(p, g, 1); }, ErrorKind::validation));

    const auto scores = eval::per_class_scores(p, g, 2);
    CHECK(scores[0].precision == 1.0);
    CHECK(scores[0].recall == 0.5);
    CHECK(scores[1].precision == 0.5);
    CHECK(scores[1].support == 1);
}

TEST_CASE("micro-F1 equals accuracy and ignores sample order") {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(40), k = 2 + rng.uniform_index(8);
        std::vector<std::size_t> p(n), g(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = rng.uniform_index(k);
            g[i] = rng.uniform_index(k);
        }
        const double f1 = eval::micro_f1(p, g, k);
        CHECK(f1 == doctest::Approx(eval::accuracy(p, g)).epsilon(1e-12));
        CHECK(f1 >= 0.0);
        CHECK(f1 <= 1.0);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        std::vector<std::size_t> ps, gs;
        for (auto i : order) {
            ps.push_back(p[i]);
            gs.push_back(g[i]);
        }
        CHECK(eval::micro_f1(ps, gs, k) == f1);
    }
}

TEST_CASE("config hash tracks config content") {
    const auto a = tiny_experiment();
    auto b = tiny_experiment();
    CHECK(eval::config_hash(a) == eval::config_hash(b));
    b.train.stages[3].steps = 3;
    CHECK(eval::config_hash(a) != eval::config_hash(b));
    b = tiny_experiment();
    b.seeds = {1};
    CHECK(eval::config_hash(a) != eval::config_hash(b));
    const auto round = eval::experiment_config_from_json(eval::to_json(a));
    CHECK(eval::config_hash(round) == eval::config_hash(a));
}

TEST_CASE("arm misconfiguration is rejected before training") {
    auto j = eval::to_json(tiny_experiment());
    j["arms"] = {"ours_curriculum_masking", "meta_sgd"};
    CHECK(throws_kind([&] { eval::experiment_config_from_json(j); }, ErrorKind::validation));

    auto dup = tiny_experiment();
    dup.arms = {eval::Arm::direct_finetune, eval::Arm::direct_finetune};
    CHECK(throws_kind([&] { eval::run_experiment(dup); }, ErrorKind::validation));
    auto none = tiny_experiment();
    none.arms.clear();
    CHECK(throws_kind([&] { eval::run_experiment(none); }, ErrorKind::validation));
    auto wide = tiny_experiment();
    wide.train.eval.episode.n_way = 4;
    CHECK(throws_kind([&] { eval::run_experiment(wide); }, ErrorKind::validation));
    auto shots = tiny_experiment();
    shots.train.eval.episode.k_shot = 4;
    CHECK(throws_kind([&] { eval::run_experiment(shots); }, ErrorKind::validation));
}

TEST_CASE("evaluation episodes are single-modality, held-out and seed-determined") {
    auto cfg = tiny_experiment();
    cfg.train.data.modalities = {data::Modality::tabular, data::Modality::image2d_gray};
    const auto ds = train::load_dataset(cfg.train);
    const auto split = train::split_classes(ds, 3, 0);
    const auto eps = eval::evaluation_episodes(split.heldout, cfg.train.eval, 9);
    REQUIRE(eps.size() == 4);
    for (std::size_t e = 0; e < eps.size(); ++e) {
        const auto mod = split.heldout.sample(eps[e].support.front().sample).modality;
        CHECK(mod == (e % 2 == 0 ? data::Modality::tabular : data::Modality::image2d_gray));
        for (const auto& it : eps[e].query) {
            CHECK(split.heldout.sample(it.sample).modality == mod);
        }
    }
    CHECK(eval::evaluation_episodes(split.heldout, cfg.train.eval, 9) == eps);
    CHECK_FALSE(eval::evaluation_episodes(split.heldout, cfg.train.eval, 10) == eps);
}

TEST_CASE("experiments pair arms on one query stream and reproduce byte-for-byte") {
    const auto cfg = tiny_experiment();
    const auto root = std::filesystem::temp_directory_path() / "m3f_test_experiment";
    std::filesystem::remove_all(root);
    const auto first = eval::run_experiment(cfg, {root / "a", nullptr});
    const auto second = eval::run_experiment(cfg, {root / "b", nullptr});
    REQUIRE(first.size() == 4);
    for (const auto& r : first) {
        CAPTURE(r.arm);
        CHECK(r.query_stream_hash == first.front().query_stream_hash);
        CHECK(r.n_episodes == 4);
        CHECK(r.n_queries == 12);
        CHECK(r.micro_f1 == r.accuracy);
        CHECK(r.config_hash == eval::config_hash(cfg));
    }
    CHECK(first[0].control_micro_f1.has_value());
    CHECK_FALSE(first[3].control_micro_f1.has_value());
    CHECK(slurp(root / "a" / "reports.jsonl") == slurp(root / "b" / "reports.jsonl"));
    CHECK(slurp(root / "a" / "logs" / "direct_finetune_seed0.jsonl") ==
          slurp(root / "b" / "logs" / "direct_finetune_seed0.jsonl"));

    const auto loaded = eval::read_reports(root / "a");
    REQUIRE(loaded.size() == first.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(eval::to_json(loaded[i]) == eval::to_json(first[i]));
    }
    const auto summary = slurp(root / "a" / "summary.txt");
    CHECK(summary.find("paper-reported, not desk-reproduced") != std::string::npos);
    CHECK(summary.find("protonet_baseline") != std::string::npos);
    std::filesystem::remove_all(root);
}

TEST_CASE("ablation sweeps run with matched seeds and report trends") {
    eval::AblationConfig cfg;
    cfg.base = tiny_experiment();
    cfg.base.train.eval.episodes = 2;
    cfg.axis = eval::Axis::masking_applications;
    cfg.values = {1, 3};
    const auto r = eval::run_ablation(cfg);
    REQUIRE(r.reports.size() == 2);
    CHECK(r.reports[0].query_stream_hash == r.reports[1].query_stream_hash);
    CHECK(r.reports[0].config_hash != r.reports[1].config_hash);
    CHECK(r.reports[1].cell->at("value") == 3.0);
    CHECK(std::count(r.plot_data.begin(), r.plot_data.end(), '\n') == 4);
    CHECK(eval::trend_summary(r).find("masking_applications") != std::string::npos);

    cfg.values = {3, 1};
    CHECK(throws_kind([&] { eval::run_ablation(cfg); }, ErrorKind::validation));
    cfg.axis = eval::Axis::masking_ratio;
    cfg.values = {0.05, 1.5};
    CHECK(throws_kind([&] { eval::run_ablation(cfg); }, ErrorKind::validation));
    CHECK(throws_kind([] { eval::parse_axis("dropout"); }, ErrorKind::validation));
    CHECK(eval::default_axis_values(eval::Axis::masking_applications) == std::vector<double>{1, 5, 10, 50, 100});
    CHECK(eval::default_axis_values(eval::Axis::lora_rank) == std::vector<double>{4, 16, 64});
    const auto ratios = eval::default_axis_values(eval::Axis::masking_ratio);
    CHECK(std::find(ratios.begin(), ratios.end(), 0.05) != ratios.end());
}

TEST_CASE("trend diagnostics") {
    const std::vector<double> v{1, 2, 3, 4};
    auto t = eval::trend_of(v, std::vector<double>{0.5, 0.6, 0.6, 0.7});
    CHECK(t.monotone_nondecreasing);
    CHECK_FALSE(t.monotone_nonincreasing);
    CHECK(t.increases == 2);
    CHECK(t.best_value == 4);
    t = eval::trend_of(v, std::vector<double>{0.7, 0.5, 0.6, 0.4});
    CHECK_FALSE(t.monotone_nondecreasing);
    CHECK(t.decreases == 2);
    CHECK(t.best_value == 1);
    CHECK(t.best_micro_f1 == 0.7);
}

TEST_CASE("published reference rows") {
    const auto rows = eval::published_reference_rows();
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].arm == "ours_curriculum_masking");
    CHECK(rows[0].micro_f1 == 0.63);
    CHECK(rows[1].micro_f1 == 0.60);
    CHECK(rows[2].micro_f1 == 0.53);
    CHECK(rows[3].micro_f1 == 0.50);
    CHECK(eval::kPublishedBestRatio == 0.05);
    CHECK(eval::kPublishedBestRatioMicroF1 == 0.65);
}
