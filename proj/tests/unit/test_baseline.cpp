#include <doctest.h>

#include <cmath>

#include "baseline/protonet.hpp"
#include "data/generator.hpp"
#include "support/checks.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "train/stages.hpp"

using namespace m3f;
using ad::Tape;
using ad::Tensor;
using data::Modality;
using m3f::testing::throws_kind;

namespace {

Tensor rows(std::size_t d, std::vector<float> v) {
    const std::size_t n = v.size() / d;
    return Tensor::from({n, d}, std::move(v));
}

data::Dataset mixed_data(std::uint64_t seed) {
    data::GeneratorSpec spec;
    spec.modalities = {Modality::image2d_gray, Modality::image2d_rgb, Modality::volume3d, Modality::tabular,
                       Modality::timecourse};
    spec.classes_per_modality = 3;
    spec.samples_per_class = 4;
    spec.seed = seed;
    return data::generate_synthetic(spec);
}

}  // namespace

TEST_CASE("protonet: equidistant query costs ln 2; a single class costs nothing") {
    Tape tape(false);
    const auto support = rows(2, {0, 0, 2, 0});
    const std::size_t sc[] = {0, 1};
    const auto query = rows(2, {1, 5});
    const std::size_t qc[] = {1};
    const auto loss = baseline::prototype_loss(tape, support, sc, query, qc, 2);
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    const std::size_t one[] = {0, 0};
    const std::size_t q0[] = {0};
    CHECK(baseline::prototype_loss(tape, support, one, query, q0, 1).item() == 0.0f);
}

TEST_CASE("protonet: hand-computed nearest prototypes") {
    Tape tape(false);
    const auto support = rows(2, {0, 0, 10, 10});
    const std::size_t sc[] = {0, 1};
    const auto protos = baseline::prototypes(tape, support, sc, 2);
    const auto query = rows(2, {1, 1});
    const auto d = ad::sq_dist(tape, query, protos);
    CHECK(d.values()[0] == 2.0f);
    CHECK(d.values()[1] == 162.0f);
    CHECK(baseline::nearest_prototype(query, protos) == std::vector<std::size_t>{0});
    CHECK(baseline::nearest_prototype(rows(2, {10, 10, 0, 0, 5, 5}), protos) == std::vector<std::size_t>{1, 0, 0});
}

TEST_CASE("protonet: prototypes are exact means and invariant to support order") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n_way = 2 + rng.uniform_index(4), k = 1 + rng.uniform_index(6), d = 8;
        std::vector<float> v(n_way * k * d);
        for (auto& x : v) {
            x = rng.normal() * 3.0f;
        }
        std::vector<std::size_t> classes;
        for (std::size_t i = 0; i < n_way * k; ++i) {
            classes.push_back(i % n_way);
        }
        Tape tape(false);
        const auto support = rows(d, v);
        const auto protos = baseline::prototypes(tape, support, classes, n_way);
        for (std::size_t c = 0; c < n_way; ++c) {
            for (std::size_t j = 0; j < d; ++j) {
                float acc = 0.0f;
                for (std::size_t i = c; i < n_way * k; i += n_way) {
                    acc += v[i * d + j];
                }
                CHECK(protos.values()[c * d + j] == acc / static_cast<float>(k));
            }
        }
        // Reverse the support order within every class.
        std::vector<float> reversed(v.size());
        for (std::size_t i = 0; i < n_way * k; ++i) {
            const std::size_t rank = i / n_way, c = i % n_way;
            const std::size_t dst = (k - 1 - rank) * n_way + c;
            std::copy_n(v.begin() + i * d, d, reversed.begin() + dst * d);
        }
        const auto again = baseline::prototypes(tape, rows(d, reversed), classes, n_way);
        for (std::size_t i = 0; i < protos.size(); ++i) {
            CHECK(std::abs(again.values()[i] - protos.values()[i]) <= 1e-6f * std::max(1.0f, std::abs(protos.values()[i])));
        }
    }
}

TEST_CASE("protonet: embedding networks and prototype loss pass finite-difference checks") {
    const auto ds = mixed_data(4);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        auto m = baseline::init_protonet({16, 8, 4, 6, 4, 8}, seed);
        const auto ep = data::sample_episode(ds, {3, 2, 1}, seed);
        std::vector<const data::Sample*> samples;
        for (const auto& it : ep.support) {
            samples.push_back(&ds.sample(it.sample));
        }
        std::vector<Tensor> leaves;
        for (const auto& name : m.params.names()) {
            leaves.push_back(m.params.get(name));
        }
        const auto net = testing::grad_check([&](Tape& t) { return baseline::embed(t, m, samples); }, leaves, seed);
        CAPTURE(net.relative_error);
        CHECK(net.relative_error < 1e-4);

        Rng rng(seed);
        std::vector<float> s(6 * 8), q(3 * 8);
        for (auto* v : {&s, &q}) {
            for (auto& x : *v) {
                x = rng.normal();
            }
        }
        const auto support = Tensor::from({6, 8}, s, true);
        const auto query = Tensor::from({3, 8}, q, true);
        const std::vector<std::size_t> sc{0, 1, 2, 0, 1, 2}, qc{2, 0, 1};
        const auto loss = testing::grad_check(
            [&](Tape& t) { return baseline::prototype_loss(t, support, sc, query, qc, 3); }, {support, query}, seed,
            3e-2);
        CAPTURE(loss.relative_error);
        CHECK(loss.relative_error < 1e-4);
    }
}

TEST_CASE("protonet: classify matches a brute-force nearest-prototype scan") {
    const auto ds = mixed_data(5);
    const auto m = baseline::init_protonet({}, 6);
    for (std::uint64_t e = 0; e < 200; ++e) {
        const auto ep = data::sample_episode(ds, {2 + e % 4, 1 + e % 3, 1}, e);
        CAPTURE(e);
        CHECK(baseline::classify(m, ds, ep) == m3f::testing::brute_force_nearest(m, ds, ep));
    }
    // Query equal to a lone support sample lands on its class.
    auto ep = data::sample_episode(ds, {3, 1, 1}, 7);
    ep.query = ep.support;
    CHECK(baseline::classify(m, ds, ep) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("protonet: tabular table features ignore row order") {
    const auto ds = mixed_data(8);
    for (const auto& s : ds.samples()) {
        if (s.modality != Modality::tabular) {
            continue;
        }
        auto flipped = s;
        auto& cells = std::get<data::TablePayload>(flipped.payload).cells;
        const std::size_t r = cells.shape[0], c = cells.shape[1];
        for (std::size_t i = 0; i < r / 2; ++i) {
            std::swap_ranges(cells.values.begin() + i * c, cells.values.begin() + (i + 1) * c,
                             cells.values.begin() + (r - 1 - i) * c);
        }
        const auto a = baseline::input_features(s, {});
        const auto b = baseline::input_features(flipped, {});
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(std::abs(a[i] - b[i]) < 1e-5f);
        }
    }
}

TEST_CASE("protonet: training rejects class overlap; separable and chance suites") {
    auto run = [](double separation) {
        auto cfg = train::default_train_config();
        cfg.data.class_separation = separation;
        const auto ds = data::generate_synthetic(cfg.data);
        const auto split = train::split_classes(ds, cfg.split.heldout_classes_per_modality, cfg.seed);
        std::vector<data::Episode> eps;
        for (std::uint64_t e = 0; e < 200; ++e) {
            eps.push_back(data::sample_episode(split.heldout, cfg.eval.episode, mix_seed(17, e)));
        }
        baseline::BaselineConfig bc;
        auto m = baseline::init_protonet(bc.model, 1);
        const auto overlap = data::sample_episode(split.pretrain, cfg.eval.episode, 1);
        CHECK(throws_kind([&] { baseline::train_baseline(m, split.pretrain, split.pretrain, {&overlap, 1}, bc, 2); },
                          ErrorKind::validation));
        return baseline::train_baseline(m, split.pretrain, split.heldout, eps, bc, 2).micro_f1;
    };
    const double separable = run(5.0);
    CAPTURE(separable);
    CHECK(separable >= 0.85);
    const double chance = run(0.0);
    CAPTURE(chance);
    CHECK(std::abs(chance - 0.2) <= 0.15);
}

TEST_CASE("protonet config JSON is strict") {
    const auto j = baseline::to_json(baseline::BaselineConfig{});
    CHECK(baseline::to_json(baseline::baseline_config_from_json(j)) == j);
    auto bad = j;
    bad["model"]["depth"] = 3;
    CHECK(throws_kind([&] { baseline::baseline_config_from_json(bad); }, ErrorKind::configuration));
}
