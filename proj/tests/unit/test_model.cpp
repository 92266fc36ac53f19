#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "common/error.hpp"
#include "data/generator.hpp"
#include "decoder/decoder.hpp"
#include "encoders/encoders.hpp"
#include "masking/masking.hpp"
#include "model/model.hpp"
#include "support/checks.hpp"
#include "support/gradcheck.hpp"

using namespace m3f;
using data::Modality;
using m3f::testing::grad_check;
using m3f::testing::throws_kind;

namespace {

data::Dataset make_data(std::vector<Modality> mods, std::uint64_t seed = 3, double separation = 1.0) {
    data::GeneratorSpec spec;
    spec.modalities = std::move(mods);
    spec.classes_per_modality = 3;
    spec.samples_per_class = 2;
    spec.class_separation = separation;
    spec.seed = seed;
    return data::generate_synthetic(spec);
}

const data::Sample& first_of(const data::Dataset& ds, Modality m) {
    for (const auto& s : ds.samples()) {
        if (s.modality == m) {
            return s;
        }
    }
    throw std::runtime_error("modality missing");
}

bool same_values(const ad::Tensor& a, const ad::Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

std::vector<float> row_of(const ad::Tensor& t, std::size_t r) {
    const auto v = t.values();
    return {v.begin() + static_cast<std::ptrdiff_t>(r * t.cols()), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * t.cols())};
}

model::ModelConfig tiny_config() {
    model::ModelConfig cfg;
    cfg.encoder.d_enc = 8;
    cfg.encoder.d_model = 8;
    cfg.encoder.patch = 4;
    cfg.encoder.table_hash_buckets = 8;
    cfg.decoder.d_model = 8;
    cfg.decoder.heads = 2;
    cfg.decoder.layers = 1;
    cfg.decoder.d_ff = 16;
    cfg.decoder.context = 96;
    return cfg;
}

std::vector<ad::Tensor> params_with_prefix(model::ParamStore& store, std::string_view prefix) {
    std::vector<ad::Tensor> out;
    for (const auto& name : store.names()) {
        if (name.rfind(prefix, 0) == 0) {
            out.push_back(store.get(name));
        }
    }
    return out;
}

}  // namespace

TEST_CASE("encoders: unit counts per modality") {
    const auto ds = make_data({Modality::image2d_gray, Modality::image2d_rgb, Modality::volume3d, Modality::tabular,
                               Modality::timecourse});
    const auto m = model::init_model({}, 1);
    ad::Tape tape(false);
    auto count = [&](Modality mod) {
        return encoders::encode(tape, m.params, m.config.encoder, first_of(ds, mod)).units.rows();
    };
    CHECK(count(Modality::image2d_gray) == 4);
    CHECK(count(Modality::image2d_rgb) == 4);
    CHECK(count(Modality::volume3d) == 4);
    CHECK(count(Modality::tabular) == 1);
    CHECK(count(Modality::timecourse) == 12);
}

TEST_CASE("encoders: masked patches keep their original positional codes") {
    const auto ds = make_data({Modality::image2d_gray, Modality::volume3d});
    const auto m = model::init_model({}, 2);
    for (auto mod : {Modality::image2d_gray, Modality::volume3d}) {
        const auto& s = first_of(ds, mod);
        for (std::uint64_t app = 0; app < 4; ++app) {
            const auto view = masking::mask_sample(s, 8, {mod, 0.5, 7, app});
            ad::Tape tape(false);
            const auto full = encoders::encode(tape, m.params, m.config.encoder, s);
            const auto part = encoders::encode(tape, m.params, m.config.encoder, s, &view);
            REQUIRE(part.units.rows() == 2);
            CHECK(part.unit_ids == view.visible_units);
            for (std::size_t i = 0; i < part.unit_ids.size(); ++i) {
                const std::size_t u = part.unit_ids[i];
                const auto a = row_of(part.units, i), ca = row_of(part.content, i);
                const auto b = row_of(full.units, u), cb = row_of(full.content, u);
                // Same pixels and same original coordinate, so the row matches the unmasked run.
                CHECK(ca == cb);
                CHECK(a == b);
            }
        }
    }
}

TEST_CASE("encoders: distinct images give distinct embeddings") {
    const auto ds = make_data({Modality::image2d_gray});
    const auto m = model::init_model({}, 4);
    ad::Tape tape(false);
    const auto a = encoders::encode(tape, m.params, m.config.encoder, ds.sample(0));
    const auto b = encoders::encode(tape, m.params, m.config.encoder, ds.sample(2));
    CHECK_FALSE(same_values(a.units, b.units));
}

TEST_CASE("encoders: swapping two tubelets swaps their content embeddings") {
    const auto ds = make_data({Modality::volume3d});
    const auto m = model::init_model({}, 5);
    const auto& s = ds.sample(0);
    auto swapped = s;
    auto& vox = std::get<data::VolumePayload>(swapped.payload).voxels;
    // 8x16x16x1 with tubelet 8: grid 1x2x2, swap units (0,0,0) and (0,1,1).
    const std::size_t w = vox.shape[2];
    for (std::size_t z = 0; z < 8; ++z) {
        for (std::size_t y = 0; y < 8; ++y) {
            for (std::size_t x = 0; x < 8; ++x) {
                std::swap(vox.values[(z * 16 + y) * w + x], vox.values[(z * 16 + y + 8) * w + x + 8]);
            }
        }
    }
    ad::Tape tape(false);
    const auto a = encoders::encode(tape, m.params, m.config.encoder, s);
    const auto b = encoders::encode(tape, m.params, m.config.encoder, swapped);
    CHECK(row_of(a.content, 0) == row_of(b.content, 3));
    CHECK(row_of(a.content, 3) == row_of(b.content, 0));
    CHECK(row_of(a.content, 1) == row_of(b.content, 1));
    CHECK(row_of(a.units, 0) != row_of(b.units, 0));
}

TEST_CASE("encoders: zero volume gives equal content rows") {
    const auto ds = make_data({Modality::volume3d});
    const auto m = model::init_model({}, 6);
    auto s = ds.sample(0);
    auto& vox = std::get<data::VolumePayload>(s.payload).voxels;
    std::fill(vox.values.begin(), vox.values.end(), 0.0f);
    ad::Tape tape(false);
    const auto out = encoders::encode(tape, m.params, m.config.encoder, s);
    for (std::size_t r = 1; r < 4; ++r) {
        CHECK(row_of(out.content, r) == row_of(out.content, 0));
        CHECK(row_of(out.units, r) != row_of(out.units, 0));
    }
}

TEST_CASE("encoders: tabular summary properties") {
    const auto ds = make_data({Modality::tabular});
    const auto m = model::init_model({}, 7);
    const auto& s = ds.sample(0);
    ad::Tape tape(false);
    const auto base = encoders::encode(tape, m.params, m.config.encoder, s).units;
    CHECK(same_values(base, encoders::encode(tape, m.params, m.config.encoder, s).units));

    const auto full_mask = masking::mask_sample(s, 8, {Modality::tabular, 1.0, 1, 0});
    CHECK_FALSE(same_values(base, encoders::encode(tape, m.params, m.config.encoder, s, &full_mask).units));

    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto permuted = s;
        auto& cells = std::get<data::TablePayload>(permuted.payload).cells;
        const std::size_t rows = cells.shape[0], cols = cells.shape[1];
        std::vector<std::size_t> perm(rows);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        const auto& orig = std::get<data::TablePayload>(s.payload).cells.values;
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(orig.begin() + static_cast<std::ptrdiff_t>(perm[r] * cols), cols,
                        cells.values.begin() + static_cast<std::ptrdiff_t>(r * cols));
        }
        CHECK(same_values(base, encoders::encode(tape, m.params, m.config.encoder, permuted).units));
    }

    auto empty = s;
    std::get<data::TablePayload>(empty.payload).cells = {{0, 8}, {}};
    CHECK(throws_kind([&] { encoders::encode(tape, m.params, m.config.encoder, empty); }, ErrorKind::validation));
}

TEST_CASE("encoders: timecourse masking and order") {
    const auto ds = make_data({Modality::timecourse});
    const auto m = model::init_model({}, 8);
    const auto& s = ds.sample(0);
    const auto view = masking::mask_sample(s, 8, {Modality::timecourse, 0.25, 3, 0});
    ad::Tape tape(false);
    const auto out = encoders::encode(tape, m.params, m.config.encoder, s, &view);
    REQUIRE(out.units.rows() == 12);
    const auto mv = m.params.get("encoder.timecourse.mask_vector").values();
    std::size_t masked = 0;
    for (std::size_t t = 0; t < 12; ++t) {
        if (!view.mask.row_masked[t]) {
            continue;
        }
        ++masked;
        const auto code = encoders::positional_code({t}, 128);
        const auto row = row_of(out.units, t);
        for (std::size_t j = 0; j < row.size(); ++j) {
            CHECK(row[j] == mv[j] + code[j]);
        }
    }
    CHECK(masked == 3);

    auto reversed = s;
    auto& series = std::get<data::TimecoursePayload>(reversed.payload).series;
    const std::size_t f = series.shape[1];
    for (std::size_t t = 0; t < 6; ++t) {
        std::swap_ranges(series.values.begin() + static_cast<std::ptrdiff_t>(t * f),
                         series.values.begin() + static_cast<std::ptrdiff_t>((t + 1) * f),
                         series.values.begin() + static_cast<std::ptrdiff_t>((11 - t) * f));
    }
    const auto a = encoders::encode(tape, m.params, m.config.encoder, s).units;
    const auto b = encoders::encode(tape, m.params, m.config.encoder, reversed).units;
    CHECK_FALSE(same_values(a, b));
}

TEST_CASE("routing law over random masked samples") {
    const auto ds = make_data({Modality::image2d_gray, Modality::image2d_rgb, Modality::volume3d, Modality::tabular,
                               Modality::timecourse});
    const auto m = model::init_model({}, 9);
    Rng rng(12);
    const double ratios[] = {0.0, 0.05, 0.25, 0.5, 1.0};
    for (int trial = 0; trial < 100; ++trial) {
        const auto& s = ds.sample(rng.uniform_index(ds.size()));
        const double ratio = ratios[rng.uniform_index(5)];
        const auto view = masking::mask_sample(s, 8, {s.modality, ratio, static_cast<std::uint64_t>(trial), 0});
        ad::Tape tape(false);
        const auto media = model::media_tokens(tape, m, s, &view);
        CAPTURE(data::to_string(s.modality));
        CAPTURE(ratio);
        std::size_t expected = 1;
        switch (s.modality) {
        case Modality::tabular: break;
        case Modality::timecourse: expected += 12; break;
        default: expected += view.visible_units.size(); break;
        }
        CHECK(media.count() == expected);
        CHECK((media.provenance == encoders::Provenance::special_only) == (media.count() == 1));
        const bool nothing_visible = s.modality != Modality::timecourse && view.visible_units.empty();
        CHECK((media.provenance == encoders::Provenance::special_only) ==
              (s.modality == Modality::tabular || nothing_visible));
        // The special embedding leads unless it was folded with the table summary.
        if (s.modality != Modality::tabular) {
            CHECK(row_of(media.tokens, 0) == row_of(m.params.get(encoders::special_name(s.modality)), 0));
        }
    }
    ad::Tape tape(false);
    const auto enc = encoders::encode(tape, m.params, m.config.encoder, first_of(ds, Modality::tabular));
    CHECK(throws_kind([&] { encoders::project(tape, m.params, enc, Modality::image2d_gray); }, ErrorKind::usage));
}

TEST_CASE("encoders: every parameter receives gradient") {
    const auto ds = make_data({Modality::image2d_gray, Modality::image2d_rgb, Modality::volume3d, Modality::tabular,
                               Modality::timecourse});
    auto m = model::init_model({}, 10);
    ad::Tape tape;
    std::vector<ad::Tensor> terms;
    for (auto mod : data::kAllModalities) {
        const auto& s = first_of(ds, mod);
        const auto view = masking::mask_sample(s, 8, {mod, 0.25, 1, 0});
        terms.push_back(ad::sum(tape, ad::gelu(tape, model::media_tokens(tape, m, s, &view).tokens)));
    }
    ad::Tensor total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) {
        total = ad::add(tape, total, terms[i]);
    }
    tape.backward(total);
    for (const auto& name : m.params.names()) {
        if (name.rfind("decoder.", 0) == 0) {
            continue;
        }
        CAPTURE(name);
        const auto& p = m.params.get(name);
        REQUIRE(p.has_grad());
        double norm = 0.0;
        for (float g : p.grad()) {
            CHECK(std::isfinite(g));
            norm += static_cast<double>(g) * g;
        }
        CHECK(norm > 0.0);
    }
}

TEST_CASE("gradient checks for encoders, projector and decoder block") {
    const auto ds = make_data({Modality::image2d_gray, Modality::image2d_rgb, Modality::volume3d, Modality::tabular,
                               Modality::timecourse});
    const auto cfg = tiny_config();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        auto m = model::init_model(cfg, 50 + seed);
        Rng rng(90 + seed);
        for (auto mod : data::kAllModalities) {
            CAPTURE(data::to_string(mod));
            const auto& s = first_of(ds, mod);
            const auto view = masking::mask_sample(s, cfg.encoder.patch, {mod, 0.25, seed, 0});
            const auto leaves = params_with_prefix(m.params, encoders::encoder_prefix(mod));
            const auto enc = grad_check(
                [&](ad::Tape& t) { return encoders::encode(t, m.params, cfg.encoder, s, &view).units; }, leaves, seed);
            CHECK(enc.relative_error < 1e-4);

            auto proj_leaves = params_with_prefix(m.params, "projector.");
            proj_leaves.push_back(m.params.get(encoders::special_name(mod)));
            ad::Tape tape(false);
            const auto fixed = encoders::encode(tape, m.params, cfg.encoder, s, &view);
            const auto proj = grad_check(
                [&](ad::Tape& t) { return encoders::project(t, m.params, fixed, mod).tokens; }, proj_leaves, seed);
            CHECK(proj.relative_error < 1e-4);
        }

        auto x = m3f::testing::random_tensor({7, cfg.decoder.d_model}, rng);
        auto leaves = params_with_prefix(m.params, "decoder.layer0.");
        leaves.push_back(x);
        const auto dec = grad_check(
            [&](ad::Tape& t) { return decoder::block(t, m.params, cfg.decoder, x, 0); }, leaves, seed);
        CHECK(dec.relative_error < 1e-4);
    }
}

TEST_CASE("decoder: causality is bitwise") {
    const auto m = model::init_model({}, 13);
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        decoder::TokenSequence seq;
        seq.ids.push_back(decoder::kBos);
        for (int i = 0; i < 30; ++i) {
            seq.ids.push_back(static_cast<std::int32_t>(rng.uniform_index(256)));
        }
        const std::size_t j = 1 + rng.uniform_index(30);
        auto changed = seq;
        changed.ids[j] = (changed.ids[j] + 1) % 256;
        ad::Tape tape(false);
        const auto a = decoder::forward(tape, m.params, m.config.decoder, seq, {});
        const auto b = decoder::forward(tape, m.params, m.config.decoder, changed, {});
        const std::size_t prefix = j * decoder::kVocabSize;
        CHECK(std::equal(a.values().begin(), a.values().begin() + static_cast<std::ptrdiff_t>(prefix),
                         b.values().begin()));
        CHECK_FALSE(std::equal(a.values().begin() + static_cast<std::ptrdiff_t>(prefix),
                               a.values().begin() + static_cast<std::ptrdiff_t>(prefix + decoder::kVocabSize),
                               b.values().begin() + static_cast<std::ptrdiff_t>(prefix)));
    }
}

TEST_CASE("decoder: media expansion and context length") {
    const auto ds = make_data({Modality::tabular, Modality::image2d_gray});
    const auto m = model::init_model({}, 14);
    const std::string options[] = {"aa", "bb"};
    const auto& tab = first_of(ds, Modality::tabular);
    const auto rendered = data::render_prompt(data::template_bank(data::TaskKind::classification)[0], tab, options);
    const auto seq = decoder::tokenize_prompt(rendered);
    ad::Tape tape(false);
    const ad::Tensor tab_media[] = {model::media_tokens(tape, m, tab).tokens};
    CHECK(decoder::forward(tape, m.params, m.config.decoder, seq, tab_media).rows() == seq.ids.size());
    const ad::Tensor img_media[] = {model::media_tokens(tape, m, first_of(ds, Modality::image2d_gray)).tokens};
    CHECK(decoder::forward(tape, m.params, m.config.decoder, seq, img_media).rows() == seq.ids.size() + 4);

    decoder::TokenSequence long_seq;
    long_seq.ids.assign(520, 'a');
    const auto msg = m3f::testing::error_message([&] { decoder::forward(tape, m.params, m.config.decoder, long_seq, {}); });
    CHECK(msg.find("expanded length 520") != std::string::npos);
    CHECK(throws_kind([&] { decoder::forward(tape, m.params, m.config.decoder, long_seq, {}); }, ErrorKind::length));
    CHECK(throws_kind([&] { decoder::forward(tape, m.params, m.config.decoder, seq, {}); }, ErrorKind::usage));
}

TEST_CASE("decoder: trailing PAD positions carry no loss or gradient") {
    auto m = model::init_model({}, 15);
    decoder::TokenSequence seq;
    seq.ids = {decoder::kBos, 'h', 'i', ':'};
    seq.loss_mask.assign(seq.ids.size(), 0);
    decoder::append_answer(seq, "ok");
    auto padded = seq;
    for (int i = 0; i < 4; ++i) {
        padded.ids.push_back(decoder::kPad);
        padded.loss_mask.push_back(0);
    }
    ad::Tape t1(false);
    const float plain = decoder::sequence_loss(t1, m.params, m.config.decoder, seq, {}).loss.item();
    ad::Tape t2;
    const auto ce = decoder::sequence_loss(t2, m.params, m.config.decoder, padded, {});
    CHECK(ce.loss.item() == plain);
    m.params.zero_grads();
    t2.backward(ce.loss);
    const auto& emb = m.params.get("decoder.token_embedding");
    const auto g = emb.grad();
    const std::size_t d = emb.cols();
    for (std::size_t j = 0; j < d; ++j) {
        CHECK(g[static_cast<std::size_t>(decoder::kPad) * d + j] == 0.0f);
    }
}

TEST_CASE("decoder: uniform model scores ln 260 per target token") {
    auto m = model::init_model({}, 16);
    auto head = m.params.get("decoder.head.weight").mutable_values();
    std::fill(head.begin(), head.end(), 0.0f);
    if (const auto* b = m.params.find("decoder.head.bias")) {
        auto bv = const_cast<ad::Tensor*>(b)->mutable_values();
        std::fill(bv.begin(), bv.end(), 0.0f);
    }
    decoder::TokenSequence prompt;
    prompt.ids = {decoder::kBos, 'q', ':'};
    const std::string options[] = {"yes", "noo"};
    ad::Tape tape(false);
    const auto ce = decoder::label_loss(tape, m.params, m.config.decoder, prompt, {}, "noo", options);
    CHECK(ce.loss.item() == doctest::Approx(std::log(260.0)).epsilon(1e-6));
    CHECK(throws_kind([&] { decoder::label_loss(tape, m.params, m.config.decoder, prompt, {}, "maybe", options); },
                      ErrorKind::validation));
}

TEST_CASE("decoder: option order changes the prompt, not the target") {
    const auto ds = make_data({Modality::tabular});
    const auto m = model::init_model({}, 17);
    const auto& s = ds.sample(0);
    const std::string ab[] = {"aa", "bb"}, ba[] = {"bb", "aa"};
    const auto& t = data::template_bank(data::TaskKind::classification)[0];
    const auto p1 = decoder::tokenize_prompt(data::render_prompt(t, s, ab));
    const auto p2 = decoder::tokenize_prompt(data::render_prompt(t, s, ba));
    CHECK(p1.ids != p2.ids);
    auto s1 = p1, s2 = p2;
    s1.loss_mask.assign(s1.ids.size(), 0);
    s2.loss_mask.assign(s2.ids.size(), 0);
    decoder::append_answer(s1, "aa");
    decoder::append_answer(s2, "aa");
    CHECK(std::vector(s1.ids.begin() + static_cast<std::ptrdiff_t>(p1.ids.size()), s1.ids.end()) ==
          std::vector(s2.ids.begin() + static_cast<std::ptrdiff_t>(p2.ids.size()), s2.ids.end()));
}

TEST_CASE("decoder: greedy decoding is deterministic and respects max_new") {
    const auto m = model::init_model({}, 18);
    decoder::TokenSequence prompt;
    prompt.ids = {decoder::kBos, 'a', 'b'};
    const auto a = decoder::generate_greedy(m.params, m.config.decoder, prompt, {}, 8);
    const auto b = decoder::generate_greedy(m.params, m.config.decoder, prompt, {}, 8);
    CHECK(a == b);
    CHECK(!a.empty());
    CHECK(a.size() <= 8);
    CHECK(decoder::generate_greedy(m.params, m.config.decoder, prompt, {}, 0).empty());

    const std::string options[] = {"red", "green", "blue"};
    const auto scores = decoder::option_log_likelihoods(m.params, m.config.decoder, prompt, {}, options);
    const auto best = decoder::classify_options(m.params, m.config.decoder, prompt, {}, options);
    CHECK(best == static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin()));
}

TEST_CASE("decoder: output rendering escapes invalid UTF-8") {
    const std::vector<std::int32_t> ids{'c', 'a', 't', decoder::kEos};
    CHECK(decoder::render_output(ids) == "cat");
    const std::vector<std::int32_t> bad{'a', 0xff, 0xC3, 0xA9};
    CHECK(decoder::render_output(bad) == "a\\xFF\xC3\xA9");
}
