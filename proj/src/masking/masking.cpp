#include "masking/masking.hpp"

#include <cmath>

#include <fmt/format.h>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "data/resize.hpp"

namespace m3f::masking {

using data::Sample;

std::size_t masked_count(double ratio, std::size_t units) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        fail(ErrorKind::validation, fmt::format("masking ratio must be in [0, 1], got {}", ratio));
    }
    const double raw = std::floor(ratio * static_cast<double>(units) + 0.5);
    return static_cast<std::size_t>(std::clamp(raw, 0.0, static_cast<double>(units)));
}

std::size_t MaskDescriptor::masked_units() const {
    std::size_t n = 0;
    for (bool b : unit_masked) {
        n += b;
    }
    return n;
}

namespace {

std::vector<bool> draw_flags(Rng& rng, std::size_t units, double ratio) {
    std::vector<bool> flags(units, false);
    for (auto i : rng.choose(units, masked_count(ratio, units))) {
        flags[i] = true;
    }
    return flags;
}

MaskDescriptor base_descriptor(const Sample& s, const MaskSpec& spec) {
    if (spec.modality != s.modality) {
        fail(ErrorKind::usage, fmt::format("mask spec is for {} but sample {} is {}", data::to_string(spec.modality),
                                           s.id, data::to_string(s.modality)));
    }
    masked_count(spec.ratio, 0);
    MaskDescriptor d;
    d.modality = spec.modality;
    d.ratio = spec.ratio;
    d.seed = spec.seed;
    d.application_index = spec.application_index;
    return d;
}

const NdArray& spatial_array(const Sample& s) {
    if (const auto* img = std::get_if<data::ImagePayload>(&s.payload)) {
        return img->pixels;
    }
    if (const auto* vol = std::get_if<data::VolumePayload>(&s.payload)) {
        return vol->voxels;
    }
    fail(ErrorKind::usage, fmt::format("sample {} has no spatial payload", s.id));
}

std::vector<std::size_t> unit_grid(const NdArray& aligned, std::size_t patch) {
    std::vector<std::size_t> grid;
    for (std::size_t a = 0; a + 1 < aligned.shape.size(); ++a) {
        grid.push_back(aligned.shape[a] / patch);
    }
    return grid;
}

// Zeroes masked patches/tubelets of an aligned array; fills visible_units.
void apply_spatial(const NdArray& aligned, const MaskDescriptor& d, MaskedView& view) {
    NdArray out = aligned;
    const std::size_t spatial = aligned.shape.size() - 1;
    const std::size_t channels = aligned.shape.back();
    std::vector<std::size_t> coord(spatial, 0);
    const std::size_t cells = out.values.size() / channels;
    for (std::size_t cell = 0; cell < cells; ++cell) {
        std::size_t rem = cell, unit = 0, stride = 1;
        for (std::size_t a = spatial; a-- > 0;) {
            coord[a] = rem % aligned.shape[a];
            rem /= aligned.shape[a];
        }
        for (std::size_t a = spatial; a-- > 0;) {
            unit += coord[a] / d.patch * stride;
            stride *= d.grid[a];
        }
        if (d.unit_masked[unit]) {
            std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>(cell * channels), channels, 0.0f);
        }
    }
    for (std::size_t u = 0; u < d.unit_masked.size(); ++u) {
        if (!d.unit_masked[u]) {
            view.visible_units.push_back(u);
        }
    }
    if (spatial == 2) {
        view.visible_payload = data::ImagePayload{std::move(out)};
    } else {
        view.visible_payload = data::VolumePayload{std::move(out)};
    }
}

const NdArray& grid_array(const Sample& s) {
    if (const auto* tab = std::get_if<data::TablePayload>(&s.payload)) {
        return tab->cells;
    }
    if (const auto* tc = std::get_if<data::TimecoursePayload>(&s.payload)) {
        return tc->series;
    }
    fail(ErrorKind::usage, fmt::format("sample {} has no row/column payload", s.id));
}

// Sentinel 0 in masked cells plus the presence matrix.
void apply_grid(const Sample& s, const MaskDescriptor& d, MaskedView& view) {
    const NdArray& cells = grid_array(s);
    const std::size_t rows = cells.shape[0], cols = cells.shape[1];
    if (d.row_masked.size() != rows || d.col_masked.size() != cols) {
        fail(ErrorKind::validation, fmt::format("mask for {}x{} does not fit sample {} ({}x{})", d.row_masked.size(),
                                                d.col_masked.size(), s.id, rows, cols));
    }
    NdArray visible = cells;
    view.presence = NdArray{{rows, cols}, std::vector<float>(rows * cols, 1.0f)};
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (d.row_masked[r] || d.col_masked[c]) {
                visible.values[r * cols + c] = 0.0f;
                view.presence.values[r * cols + c] = 0.0f;
            }
        }
    }
    if (const auto* tab = std::get_if<data::TablePayload>(&s.payload)) {
        view.visible_payload = data::TablePayload{tab->columns, std::move(visible)};
    } else {
        const auto& tc = std::get<data::TimecoursePayload>(s.payload);
        view.visible_payload = data::TimecoursePayload{tc.timestamps, std::move(visible)};
    }
}

MaskedView mask_spatial(const Sample& s, std::size_t patch, const MaskSpec& spec) {
    MaskDescriptor d = base_descriptor(s, spec);
    const NdArray aligned = data::resize_to_patch_multiple(spatial_array(s), patch);
    d.patch = patch;
    d.grid = unit_grid(aligned, patch);
    std::size_t units = 1;
    for (auto g : d.grid) {
        units *= g;
    }
    Rng rng(mix_seed(spec.seed, spec.application_index));
    d.unit_masked = draw_flags(rng, units, spec.ratio);
    MaskedView view;
    view.origin_sample_id = s.id;
    view.mask = std::move(d);
    apply_spatial(aligned, view.mask, view);
    return view;
}

MaskedView mask_rows_cols(const Sample& s, const MaskSpec& spec) {
    MaskDescriptor d = base_descriptor(s, spec);
    const NdArray& cells = grid_array(s);
    Rng rng(mix_seed(spec.seed, spec.application_index));
    d.row_masked = draw_flags(rng, cells.shape[0], spec.ratio);
    d.col_masked = draw_flags(rng, cells.shape[1], spec.ratio);
    MaskedView view;
    view.origin_sample_id = s.id;
    view.mask = std::move(d);
    apply_grid(s, view.mask, view);
    return view;
}

void require(const Sample& s, std::initializer_list<Modality> allowed, const char* op) {
    for (auto m : allowed) {
        if (s.modality == m) {
            return;
        }
    }
    fail(ErrorKind::usage, fmt::format("{} cannot mask sample {} of modality {}", op, s.id,
                                       data::to_string(s.modality)));
}

}  // namespace

MaskedView mask_image(const Sample& s, std::size_t patch, const MaskSpec& spec) {
    require(s, {Modality::image2d_gray, Modality::image2d_rgb}, "mask_image");
    return mask_spatial(s, patch, spec);
}

MaskedView mask_volume(const Sample& s, std::size_t tubelet, const MaskSpec& spec) {
    require(s, {Modality::volume3d}, "mask_volume");
    return mask_spatial(s, tubelet, spec);
}

MaskedView mask_table(const Sample& s, const MaskSpec& spec) {
    require(s, {Modality::tabular}, "mask_table");
    return mask_rows_cols(s, spec);
}

MaskedView mask_timecourse(const Sample& s, const MaskSpec& spec) {
    require(s, {Modality::timecourse}, "mask_timecourse");
    return mask_rows_cols(s, spec);
}

MaskedView mask_sample(const Sample& s, std::size_t patch, const MaskSpec& spec) {
    switch (s.modality) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb: return mask_image(s, patch, spec);
    case Modality::volume3d: return mask_volume(s, patch, spec);
    case Modality::tabular: return mask_table(s, spec);
    case Modality::timecourse: return mask_timecourse(s, spec);
    }
    fail(ErrorKind::usage, "unknown modality");
}

MaskedView apply_mask(const Sample& s, const MaskDescriptor& mask) {
    if (mask.modality != s.modality) {
        fail(ErrorKind::usage, fmt::format("mask is for {} but sample {} is {}", data::to_string(mask.modality), s.id,
                                           data::to_string(s.modality)));
    }
    MaskedView view;
    view.origin_sample_id = s.id;
    view.mask = mask;
    if (s.modality == Modality::tabular || s.modality == Modality::timecourse) {
        apply_grid(s, mask, view);
        return view;
    }
    const NdArray aligned = data::resize_to_patch_multiple(spatial_array(s), mask.patch);
    if (unit_grid(aligned, mask.patch) != mask.grid) {
        fail(ErrorKind::validation, fmt::format("mask grid does not fit sample {}", s.id));
    }
    apply_spatial(aligned, view.mask, view);
    return view;
}

json to_json(const MaskDescriptor& m) {
    json j{{"modality", std::string(data::to_string(m.modality))},
           {"ratio", m.ratio},
           {"seed", m.seed},
           {"application_index", m.application_index}};
    if (!m.grid.empty()) {
        j["patch"] = m.patch;
        j["grid"] = m.grid;
        j["unit_masked"] = m.unit_masked;
    } else {
        j["row_masked"] = m.row_masked;
        j["col_masked"] = m.col_masked;
    }
    return j;
}

MaskDescriptor mask_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"modality", "ratio", "seed", "application_index", "patch", "grid", "unit_masked",
                         "row_masked", "col_masked"},
                        "mask descriptor");
    MaskDescriptor m;
    try {
        m.modality = data::parse_modality(j.at("modality").get<std::string>());
        m.ratio = j.at("ratio").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.application_index = j.at("application_index").get<std::uint64_t>();
        m.patch = j.value("patch", std::size_t{0});
        m.grid = j.value("grid", std::vector<std::size_t>{});
        m.unit_masked = j.value("unit_masked", std::vector<bool>{});
        m.row_masked = j.value("row_masked", std::vector<bool>{});
        m.col_masked = j.value("col_masked", std::vector<bool>{});
    } catch (const json::exception& e) {
        fail(ErrorKind::parse, std::string("mask descriptor: ") + e.what());
    }
    return m;
}

}  // namespace m3f::masking
