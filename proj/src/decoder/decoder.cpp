#include "decoder/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::decoder {

namespace ad = m3f::ad;
using model::apply_layer_norm;
using model::apply_linear;

void validate(const DecoderConfig& cfg) {
    if (cfg.d_model == 0 || cfg.heads == 0 || cfg.layers == 0 || cfg.d_ff == 0 || cfg.context < 2) {
        fail(ErrorKind::configuration, "decoder dimensions must be positive and context at least 2");
    }
    if (cfg.d_model % cfg.heads != 0) {
        fail(ErrorKind::configuration,
             fmt::format("d_model {} is not divisible by {} heads", cfg.d_model, cfg.heads));
    }
}

DecoderConfig decoder_config_from_json(const json& j) {
    reject_unknown_keys(j, {"d_model", "heads", "layers", "d_ff", "context"}, "decoder config");
    DecoderConfig c;
    try {
        c.d_model = j.value("d_model", c.d_model);
        c.heads = j.value("heads", c.heads);
        c.layers = j.value("layers", c.layers);
        c.d_ff = j.value("d_ff", c.d_ff);
        c.context = j.value("context", c.context);
    } catch (const json::exception& e) {
        fail(ErrorKind::configuration, std::string("decoder config: ") + e.what());
    }
    validate(c);
    return c;
}

json to_json(const DecoderConfig& c) {
    return json{{"d_model", c.d_model}, {"heads", c.heads}, {"layers", c.layers}, {"d_ff", c.d_ff},
                {"context", c.context}};
}

std::string attention_weight(std::size_t layer, std::string_view proj) {
    return fmt::format("decoder.layer{}.attn.{}.weight", layer, proj);
}

void register_params(ParamStore& store, const DecoderConfig& cfg, Rng& rng) {
    validate(cfg);
    const std::size_t d = cfg.d_model;
    store.add("decoder.token_embedding", model::normal_tensor({kVocabSize, d}, 0.02f, rng));
    store.add("decoder.position_embedding", model::normal_tensor({cfg.context, d}, 0.02f, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = fmt::format("decoder.layer{}", l);
        model::add_layer_norm(store, p + ".ln1", d);
        for (const char* proj : {"q", "k", "v", "o"}) {
            model::add_linear(store, fmt::format("{}.attn.{}", p, proj), d, d, rng);
        }
        model::add_layer_norm(store, p + ".ln2", d);
        model::add_linear(store, p + ".mlp.fc1", d, cfg.d_ff, rng);
        model::add_linear(store, p + ".mlp.fc2", cfg.d_ff, d, rng);
    }
    model::add_layer_norm(store, "decoder.ln_final", d);
    model::add_linear(store, "decoder.head", d, kVocabSize, rng);
}

TokenSequence tokenize_prompt(const data::RenderedPrompt& prompt) {
    TokenSequence seq;
    seq.ids.push_back(kBos);
    const std::string_view text = prompt.text;
    std::size_t i = 0;
    while (i < text.size()) {
        if (text.compare(i, data::kMediaMarker.size(), data::kMediaMarker) == 0) {
            seq.media_slots.push_back(seq.ids.size());
            seq.ids.push_back(kMedia);
            i += data::kMediaMarker.size();
        } else {
            seq.ids.push_back(static_cast<unsigned char>(text[i]));
            ++i;
        }
    }
    seq.loss_mask.assign(seq.ids.size(), 0);
    return seq;
}

void append_answer(TokenSequence& seq, std::string_view text, bool eos) {
    seq.loss_mask.resize(seq.ids.size(), 0);
    for (unsigned char c : text) {
        seq.ids.push_back(c);
        seq.loss_mask.push_back(1);
    }
    if (eos) {
        seq.ids.push_back(kEos);
        seq.loss_mask.push_back(1);
    }
}

void check_sequence(const TokenSequence& seq, std::size_t media_blocks) {
    if (seq.ids.empty()) {
        fail(ErrorKind::usage, "empty token sequence");
    }
    if (!seq.loss_mask.empty() && seq.loss_mask.size() != seq.ids.size()) {
        fail(ErrorKind::usage, "loss_mask length differs from ids");
    }
    std::size_t slot = 0;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        const auto id = seq.ids[i];
        if (id < 0 || id >= static_cast<std::int32_t>(kVocabSize)) {
            fail(ErrorKind::usage, fmt::format("token id {} at position {} is outside the vocabulary", id, i));
        }
        if (id == kMedia) {
            if (slot >= seq.media_slots.size() || seq.media_slots[slot] != i) {
                fail(ErrorKind::usage, fmt::format("media token at position {} is not a declared slot", i));
            }
            if (!seq.loss_mask.empty() && seq.loss_mask[i]) {
                fail(ErrorKind::usage, "a media position cannot be a loss target");
            }
            ++slot;
        }
    }
    if (slot != seq.media_slots.size()) {
        fail(ErrorKind::usage, "media_slots lists positions that do not hold media tokens");
    }
    if (slot != media_blocks) {
        fail(ErrorKind::usage, fmt::format("{} media slots but {} media blocks bound", slot, media_blocks));
    }
}

namespace {

Tensor attention(Tape& tape, const ParamStore& store, const DecoderConfig& cfg, const Tensor& x, std::size_t layer) {
    const std::string p = fmt::format("decoder.layer{}.attn", layer);
    const Tensor q = apply_linear(tape, store, x, p + ".q");
    const Tensor k = apply_linear(tape, store, x, p + ".k");
    const Tensor v = apply_linear(tape, store, x, p + ".v");
    const std::size_t dh = cfg.d_model / cfg.heads;
    const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const Tensor qh = ad::slice_cols(tape, q, h * dh, dh);
        const Tensor kh = ad::slice_cols(tape, k, h * dh, dh);
        const Tensor vh = ad::slice_cols(tape, v, h * dh, dh);
        Tensor scores = ad::scale(tape, ad::matmul(tape, qh, ad::transpose(tape, kh)), inv);
        const Tensor probs = ad::softmax(tape, ad::causal_mask(tape, scores), 1);
        heads.push_back(ad::matmul(tape, probs, vh));
    }
    return apply_linear(tape, store, ad::concat_cols(tape, heads), p + ".o");
}

}  // namespace

Tensor block(Tape& tape, const ParamStore& store, const DecoderConfig& cfg, const Tensor& x, std::size_t layer) {
    const std::string p = fmt::format("decoder.layer{}", layer);
    const Tensor y = ad::add(tape, x, attention(tape, store, cfg, apply_layer_norm(tape, store, x, p + ".ln1"), layer));
    const Tensor h = apply_layer_norm(tape, store, y, p + ".ln2");
    const Tensor inner = ad::gelu(tape, apply_linear(tape, store, h, p + ".mlp.fc1"));
    return ad::add(tape, y, apply_linear(tape, store, inner, p + ".mlp.fc2"));
}

Hidden run(Tape& tape, const ParamStore& store, const DecoderConfig& cfg, const TokenSequence& seq,
           std::span<const Tensor> media) {
    check_sequence(seq, media.size());
    std::size_t expanded = 0;
    for (std::size_t i = 0, slot = 0; i < seq.ids.size(); ++i) {
        expanded += seq.ids[i] == kMedia ? media[slot++].rows() : 1;
    }
    if (expanded > cfg.context) {
        fail(ErrorKind::length,
             fmt::format("expanded length {} ({} ids) exceeds context {}", expanded, seq.ids.size(), cfg.context));
    }

    Hidden out;
    out.last_row.reserve(seq.ids.size());
    std::vector<Tensor> pieces;
    const Tensor& table = store.get("decoder.token_embedding");
    std::vector<std::int32_t> run_ids;
    std::size_t row = 0, slot = 0;
    auto flush = [&] {
        if (!run_ids.empty()) {
            pieces.push_back(ad::embedding(tape, table, run_ids));
            run_ids.clear();
        }
    };
    for (auto id : seq.ids) {
        if (id == kMedia) {
            flush();
            const Tensor& block = media[slot++];
            if (block.rank() != 2 || block.cols() != cfg.d_model) {
                fail(ErrorKind::dimension, fmt::format("media block {} does not match d_model {}",
                                                       ad::shape_string(block.shape()), cfg.d_model));
            }
            pieces.push_back(block);
            row += block.rows();
        } else {
            run_ids.push_back(id);
            ++row;
        }
        out.last_row.push_back(row - 1);
    }
    flush();
    Tensor x = pieces.size() == 1 ? pieces[0] : ad::concat_rows(tape, pieces);
    x = ad::add(tape, x, ad::slice_rows(tape, store.get("decoder.position_embedding"), 0, expanded));

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        x = block(tape, store, cfg, x, l);
    }
    out.states = apply_layer_norm(tape, store, x, "decoder.ln_final");
    return out;
}

Tensor logits_for_rows(Tape& tape, const ParamStore& store, const Tensor& states, std::span<const std::size_t> rows) {
    const Tensor picked = rows.size() == states.rows() ? states : ad::gather_rows(tape, states, rows);
    return apply_linear(tape, store, picked, "decoder.head");
}

Tensor forward(Tape& tape, const ParamStore& store, const DecoderConfig& cfg, const TokenSequence& seq,
               std::span<const Tensor> media) {
    const Hidden h = run(tape, store, cfg, seq, media);
    return apply_linear(tape, store, h.states, "decoder.head");
}

ad::CrossEntropy sequence_loss(Tape& tape, const ParamStore& store, const DecoderConfig& cfg,
                               const TokenSequence& seq, std::span<const Tensor> media) {
    const Hidden h = run(tape, store, cfg, seq, media);
    std::vector<std::size_t> rows;
    std::vector<std::int32_t> targets;
    for (std::size_t i = 1; i < seq.ids.size(); ++i) {
        if (!seq.loss_mask.empty() && seq.loss_mask[i]) {
            rows.push_back(h.last_row[i - 1]);
            targets.push_back(seq.ids[i]);
        }
    }
    if (rows.empty()) {
        // Nothing to predict: a single ignored row keeps the loss on the tape.
        rows.push_back(0);
        targets.push_back(-100);
    }
    return ad::cross_entropy(tape, logits_for_rows(tape, store, h.states, rows), targets);
}

ad::CrossEntropy label_loss(Tape& tape, const ParamStore& store, const DecoderConfig& cfg,
                            const TokenSequence& prompt, std::span<const Tensor> media, const std::string& gold,
                            std::span<const std::string> options) {
    if (std::find(options.begin(), options.end(), gold) == options.end()) {
        fail(ErrorKind::validation, fmt::format("gold label \"{}\" is not among the rendered options", gold));
    }
    TokenSequence seq = prompt;
    seq.loss_mask.assign(seq.ids.size(), 0);
    append_answer(seq, gold);
    return sequence_loss(tape, store, cfg, seq, media);
}

namespace {

std::int32_t argmax_lowest(std::span<const float> row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) {
            best = i;
        }
    }
    return static_cast<std::int32_t>(best);
}

}  // namespace

std::vector<std::int32_t> generate_greedy(const ParamStore& store, const DecoderConfig& cfg,
                                          const TokenSequence& prompt, std::span<const Tensor> media,
                                          std::size_t max_new) {
    std::vector<std::int32_t> out;
    TokenSequence seq = prompt;
    seq.loss_mask.clear();
    std::size_t media_rows = 0;
    for (const auto& m : media) {
        media_rows += m.rows();
    }
    while (out.size() < max_new && seq.ids.size() - media.size() + media_rows < cfg.context) {
        Tape tape(false);
        const Hidden h = run(tape, store, cfg, seq, media);
        const std::size_t last = h.last_row.back();
        const Tensor logits = logits_for_rows(tape, store, h.states, std::span<const std::size_t>(&last, 1));
        const std::int32_t next = argmax_lowest(logits.values());
        out.push_back(next);
        if (next == kEos) {
            break;
        }
        seq.ids.push_back(next);
    }
    return out;
}

std::vector<double> option_log_likelihoods(const ParamStore& store, const DecoderConfig& cfg,
                                           const TokenSequence& prompt, std::span<const Tensor> media,
                                           std::span<const std::string> options) {
    std::vector<double> scores;
    scores.reserve(options.size());
    for (const auto& option : options) {
        TokenSequence seq = prompt;
        seq.loss_mask.assign(seq.ids.size(), 0);
        append_answer(seq, option);
        Tape tape(false);
        const Hidden h = run(tape, store, cfg, seq, media);
        std::vector<std::size_t> rows;
        std::vector<std::int32_t> targets;
        for (std::size_t i = prompt.ids.size(); i < seq.ids.size(); ++i) {
            rows.push_back(h.last_row[i - 1]);
            targets.push_back(seq.ids[i]);
        }
        const Tensor logits = logits_for_rows(tape, store, h.states, rows);
        double total = 0.0;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto row = logits.values().subspan(r * kVocabSize, kVocabSize);
            const double mx = *std::max_element(row.begin(), row.end());
            double z = 0.0;
            for (float v : row) {
                z += std::exp(static_cast<double>(v) - mx);
            }
            total += static_cast<double>(row[static_cast<std::size_t>(targets[r])]) - mx - std::log(z);
        }
        scores.push_back(total);
    }
    return scores;
}

std::size_t classify_options(const ParamStore& store, const DecoderConfig& cfg, const TokenSequence& prompt,
                             std::span<const Tensor> media, std::span<const std::string> options) {
    if (options.empty()) {
        fail(ErrorKind::usage, "classify_options needs at least one option");
    }
    const auto scores = option_log_likelihoods(store, cfg, prompt, media, options);
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) {
            best = i;
        }
    }
    return best;
}

std::string render_output(std::span<const std::int32_t> ids) {
    std::string bytes;
    for (auto id : ids) {
        if (id >= 0 && id < 256) {
            bytes.push_back(static_cast<char>(id));
        }
    }
    std::string out;
    std::size_t i = 0;
    auto cont = [&](std::size_t k, unsigned lo = 0x80, unsigned hi = 0xBF) {
        if (i + k >= bytes.size()) {
            return false;
        }
        const auto b = static_cast<unsigned char>(bytes[i + k]);
        return b >= lo && b <= hi;
    };
    while (i < bytes.size()) {
        const auto b = static_cast<unsigned char>(bytes[i]);
        std::size_t len = 0;
        if (b < 0x80) {
            len = 1;
        } else if (b >= 0xC2 && b <= 0xDF) {
            len = cont(1) ? 2 : 0;
        } else if (b >= 0xE0 && b <= 0xEF) {
            const unsigned lo = b == 0xE0 ? 0xA0 : 0x80, hi = b == 0xED ? 0x9F : 0xBF;
            len = cont(1, lo, hi) && cont(2) ? 3 : 0;
        } else if (b >= 0xF0 && b <= 0xF4) {
            const unsigned lo = b == 0xF0 ? 0x90 : 0x80, hi = b == 0xF4 ? 0x8F : 0xBF;
            len = cont(1, lo, hi) && cont(2) && cont(3) ? 4 : 0;
        }
        if (len == 0) {
            out += fmt::format("\\x{:02X}", b);
            ++i;
        } else {
            out.append(bytes, i, len);
            i += len;
        }
    }
    return out;
}

}  // namespace m3f::decoder
