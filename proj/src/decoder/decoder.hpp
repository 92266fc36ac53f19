#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "common/json_util.hpp"
#include "data/prompt.hpp"
#include "model/params.hpp"

namespace m3f::decoder {

using model::ParamStore;
using model::Tape;
using model::Tensor;

// Byte-level vocabulary: ids 0-255 are bytes, then the specials.
inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr std::int32_t kMedia = 259;
inline constexpr std::size_t kVocabSize = 260;

struct DecoderConfig {
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t layers = 4;
    std::size_t d_ff = 512;
    std::size_t context = 512;
};

DecoderConfig decoder_config_from_json(const json& j);
json to_json(const DecoderConfig& cfg);
void validate(const DecoderConfig& cfg);

void register_params(ParamStore& store, const DecoderConfig& cfg, Rng& rng);

// Weight names of the attention projections in layer `layer` ("q", "k", "v", "o").
std::string attention_weight(std::size_t layer, std::string_view proj);

struct TokenSequence {
    std::vector<std::int32_t> ids;
    std::vector<std::size_t> media_slots;   // positions holding kMedia
    std::vector<std::uint8_t> loss_mask;    // 1 where ids[i] is a prediction target
};

/// BOS followed by the prompt bytes; each media marker becomes one kMedia id.
TokenSequence tokenize_prompt(const data::RenderedPrompt& prompt);
/// Appends `text` bytes (and EOS) as loss-masked targets.
void append_answer(TokenSequence& seq, std::string_view text, bool eos = true);
/// Validates slot bookkeeping against the ids; usage error on mismatch.
void check_sequence(const TokenSequence& seq, std::size_t media_blocks);

struct Hidden {
    Tensor states;                       // [expanded length x d_model], after the final norm
    std::vector<std::size_t> last_row;   // per original position: its last expanded row
};

/// One pre-norm transformer layer (causal attention + MLP, both residual).
Tensor block(Tape& tape, const ParamStore& store, const DecoderConfig& cfg, const Tensor& x, std::size_t layer);

/// Expands each media slot in place into its block of vectors, then runs the
/// causal transformer. Length error when the expanded length exceeds context.
Hidden run(Tape& tape, const ParamStore& store, const DecoderConfig& cfg, const TokenSequence& seq,
           std::span<const Tensor> media);

// Vocabulary logits for selected rows of `states`.
Tensor logits_for_rows(Tape& tape, const ParamStore& store, const Tensor& states, std::span<const std::size_t> rows);

/// Logits at every expanded position: [expanded length x kVocabSize].
Tensor forward(Tape& tape, const ParamStore& store, const DecoderConfig& cfg, const TokenSequence& seq,
               std::span<const Tensor> media);

/// Mean next-token cross entropy over positions flagged in loss_mask.
ad::CrossEntropy sequence_loss(Tape& tape, const ParamStore& store, const DecoderConfig& cfg,
                               const TokenSequence& seq, std::span<const Tensor> media);

/// Cross entropy of the gold label bytes plus EOS after `prompt`. Validation
/// error when gold is not one of `options`.
ad::CrossEntropy label_loss(Tape& tape, const ParamStore& store, const DecoderConfig& cfg,
                            const TokenSequence& prompt, std::span<const Tensor> media, const std::string& gold,
                            std::span<const std::string> options);

/// Argmax decoding, lowest id on ties; stops after EOS (included) or max_new
/// tokens or when the context is full.
std::vector<std::int32_t> generate_greedy(const ParamStore& store, const DecoderConfig& cfg,
                                          const TokenSequence& prompt, std::span<const Tensor> media,
                                          std::size_t max_new);

/// Total log-probability of each option's bytes plus EOS after the prompt.
std::vector<double> option_log_likelihoods(const ParamStore& store, const DecoderConfig& cfg,
                                           const TokenSequence& prompt, std::span<const Tensor> media,
                                           std::span<const std::string> options);

/// Index of the most likely option; lowest index on ties.
std::size_t classify_options(const ParamStore& store, const DecoderConfig& cfg, const TokenSequence& prompt,
                             std::span<const Tensor> media, std::span<const std::string> options);

/// Text of byte ids (specials dropped) with invalid UTF-8 bytes escaped as \xNN.
std::string render_output(std::span<const std::int32_t> ids);

}  // namespace m3f::decoder
