#pragma once

#include <cstdint>

#include "common/json_util.hpp"
#include "decoder/decoder.hpp"
#include "encoders/encoders.hpp"
#include "masking/masking.hpp"

namespace m3f::model {

struct ModelConfig {
    encoders::EncoderConfig encoder;
    decoder::DecoderConfig decoder;
};

ModelConfig model_config_from_json(const json& j);
json to_json(const ModelConfig& cfg);

/// Encoders, special embeddings, projector and decoder in one parameter store.
struct Model {
    ModelConfig config;
    ParamStore params;
};

Model init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Encoder + projector + routing for one sample (optionally masked).
encoders::MediaTokens media_tokens(Tape& tape, const Model& m, const data::Sample& sample,
                                   const masking::MaskedView* view = nullptr);

}  // namespace m3f::model
