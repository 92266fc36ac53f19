#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "common/json_util.hpp"
#include "data/sample.hpp"

namespace m3f::masking {

using data::Modality;
using data::NdArray;

struct MaskSpec {
    Modality modality = Modality::image2d_gray;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t application_index = 0;
};

// Half-up rounding of ratio * units, clamped to [0, units]. Throws a
// validation error for a ratio outside [0, 1].
std::size_t masked_count(double ratio, std::size_t units);

struct MaskDescriptor {
    Modality modality = Modality::image2d_gray;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t application_index = 0;
    std::size_t patch = 0;  // patch / tubelet edge for images and volumes

    // Images and volumes: unit grid ({gh, gw} or {gd, gh, gw}) and one flag per unit.
    std::vector<std::size_t> grid;
    std::vector<bool> unit_masked;
    // Tables (rows x columns) and timecourses (time points x features).
    std::vector<bool> row_masked;
    std::vector<bool> col_masked;

    std::size_t masked_units() const;
    bool operator==(const MaskDescriptor&) const = default;
};

struct MaskedView {
    std::string origin_sample_id;
    data::Payload visible_payload;
    MaskDescriptor mask;
    // Images/volumes: indices of visible units in original grid order.
    std::vector<std::size_t> visible_units;
    // Tables/timecourses: R x F, 1 where the cell is present, 0 where masked.
    NdArray presence;
};

/// Images are first resized to the patch-aligned size, so visible_payload has
/// the aligned shape; masked patches are zeroed.
MaskedView mask_image(const data::Sample& sample, std::size_t patch, const MaskSpec& spec);
MaskedView mask_volume(const data::Sample& sample, std::size_t tubelet, const MaskSpec& spec);
MaskedView mask_table(const data::Sample& sample, const MaskSpec& spec);
MaskedView mask_timecourse(const data::Sample& sample, const MaskSpec& spec);

// Dispatches on the sample's modality; `patch` applies to images and volumes.
MaskedView mask_sample(const data::Sample& sample, std::size_t patch, const MaskSpec& spec);

/// Rebuilds visible_payload (and presence) from the original sample and a
/// descriptor, without drawing any randomness.
MaskedView apply_mask(const data::Sample& sample, const MaskDescriptor& mask);

json to_json(const MaskDescriptor& mask);
MaskDescriptor mask_from_json(const json& j);

}  // namespace m3f::masking
