#include "model/model.hpp"

#include "common/error.hpp"

namespace m3f::model {

ModelConfig model_config_from_json(const json& j) {
    reject_unknown_keys(j, {"encoder", "decoder"}, "model config");
    ModelConfig c;
    if (j.contains("encoder")) {
        c.encoder = encoders::encoder_config_from_json(j.at("encoder"));
    }
    if (j.contains("decoder")) {
        c.decoder = decoder::decoder_config_from_json(j.at("decoder"));
    }
    if (c.encoder.d_model != c.decoder.d_model) {
        fail(ErrorKind::configuration, "encoder.d_model must equal decoder.d_model");
    }
    return c;
}

json to_json(const ModelConfig& c) {
    return json{{"encoder", encoders::to_json(c.encoder)}, {"decoder", decoder::to_json(c.decoder)}};
}

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.encoder.d_model != cfg.decoder.d_model) {
        fail(ErrorKind::configuration, "encoder.d_model must equal decoder.d_model");
    }
    Model m;
    m.config = cfg;
    Rng enc_rng(mix_seed(seed, 1));
    encoders::register_params(m.params, cfg.encoder, enc_rng);
    Rng dec_rng(mix_seed(seed, 2));
    decoder::register_params(m.params, cfg.decoder, dec_rng);
    return m;
}

encoders::MediaTokens media_tokens(Tape& tape, const Model& m, const data::Sample& sample,
                                   const masking::MaskedView* view) {
    const auto enc = encoders::encode(tape, m.params, m.config.encoder, sample, view);
    return encoders::project(tape, m.params, enc, sample.modality);
}

}  // namespace m3f::model
