#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "common/json_util.hpp"
#include "data/sample.hpp"
#include "masking/masking.hpp"
#include "model/params.hpp"

namespace m3f::encoders {

using data::Modality;
using model::ParamStore;
using model::Tape;
using model::Tensor;

struct EncoderConfig {
    std::size_t d_enc = 128;
    std::size_t d_model = 128;
    std::size_t patch = 8;  // image patch edge and volume tubelet edge
    std::size_t image_layers = 1;
    std::size_t volume_layers = 1;
    std::size_t tabular_layers = 1;
    std::size_t timecourse_layers = 1;
    std::size_t volume_channels = 1;
    std::size_t table_hash_buckets = 64;
    std::size_t max_series_features = 16;
};

EncoderConfig encoder_config_from_json(const json& j);
json to_json(const EncoderConfig& cfg);
void validate(const EncoderConfig& cfg);

// Parameter-name prefixes: "encoder.<modality>", "special.<modality>", "projector".
std::string encoder_prefix(Modality m);
std::string special_name(Modality m);

/// Registers every encoder, the per-modality special embeddings and the
/// projector.
void register_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng);

struct EncoderOutput {
    Modality modality = Modality::tabular;
    // [units x d_enc]; undefined when nothing is visible.
    Tensor units;
    // Original unit index of each row (grid order for images/volumes, time
    // index for timecourses, 0 for the table summary).
    std::vector<std::size_t> unit_ids;
    // Content embeddings before the positional code (images/volumes only).
    Tensor content;
};

/// Encodes a sample, or its masked view when `view` is given. Dispatches on
/// the sample's modality.
EncoderOutput encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg, const data::Sample& sample,
                     const masking::MaskedView* view = nullptr);

enum class Provenance { special_only, special_plus_visible };

struct MediaTokens {
    Tensor tokens;  // [n x d_model], special embedding first
    Provenance provenance = Provenance::special_only;

    std::size_t count() const { return tokens.rows(); }
};

/// Projects encoder output to decoder width and applies the routing rule:
/// tables fold into the special token; other modalities append their units.
MediaTokens project(Tape& tape, const ParamStore& store, const EncoderOutput& enc, Modality modality);

// Sinusoidal code for a point on a grid; the width is split across axes.
std::vector<float> positional_code(const std::vector<std::size_t>& coord, std::size_t width);

// Bucket of a column name in the tabular hash embedding.
std::size_t column_bucket(const std::string& name, std::size_t buckets);

}  // namespace m3f::encoders
