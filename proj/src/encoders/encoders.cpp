#include "encoders/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "common/error.hpp"
#include "data/resize.hpp"

namespace m3f::encoders {

namespace ad = m3f::ad;
using model::apply_linear;

std::string encoder_prefix(Modality m) { return "encoder." + std::string(data::to_string(m)); }
std::string special_name(Modality m) { return "special." + std::string(data::to_string(m)); }

void validate(const EncoderConfig& cfg) {
    if (cfg.d_enc == 0 || cfg.d_model == 0 || cfg.patch == 0 || cfg.table_hash_buckets == 0 ||
        cfg.max_series_features == 0 || cfg.volume_channels == 0) {
        fail(ErrorKind::configuration, "encoder widths, patch, buckets and feature limits must be positive");
    }
}

EncoderConfig encoder_config_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"d_enc", "d_model", "patch", "image_layers", "volume_layers", "tabular_layers",
                         "timecourse_layers", "volume_channels", "table_hash_buckets", "max_series_features"},
                        "encoder config");
    EncoderConfig c;
    try {
        c.d_enc = j.value("d_enc", c.d_enc);
        c.d_model = j.value("d_model", c.d_model);
        c.patch = j.value("patch", c.patch);
        c.image_layers = j.value("image_layers", c.image_layers);
        c.volume_layers = j.value("volume_layers", c.volume_layers);
        c.tabular_layers = j.value("tabular_layers", c.tabular_layers);
        c.timecourse_layers = j.value("timecourse_layers", c.timecourse_layers);
        c.volume_channels = j.value("volume_channels", c.volume_channels);
        c.table_hash_buckets = j.value("table_hash_buckets", c.table_hash_buckets);
        c.max_series_features = j.value("max_series_features", c.max_series_features);
    } catch (const json::exception& e) {
        fail(ErrorKind::configuration, std::string("encoder config: ") + e.what());
    }
    validate(c);
    return c;
}

json to_json(const EncoderConfig& c) {
    return json{{"d_enc", c.d_enc},
                {"d_model", c.d_model},
                {"patch", c.patch},
                {"image_layers", c.image_layers},
                {"volume_layers", c.volume_layers},
                {"tabular_layers", c.tabular_layers},
                {"timecourse_layers", c.timecourse_layers},
                {"volume_channels", c.volume_channels},
                {"table_hash_buckets", c.table_hash_buckets},
                {"max_series_features", c.max_series_features}};
}

namespace {

std::size_t layers_for(const EncoderConfig& cfg, Modality m) {
    switch (m) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb: return cfg.image_layers;
    case Modality::volume3d: return cfg.volume_layers;
    case Modality::tabular: return cfg.tabular_layers;
    case Modality::timecourse: return cfg.timecourse_layers;
    }
    return 0;
}

void add_blocks(ParamStore& store, const std::string& prefix, std::size_t layers, std::size_t d, Rng& rng) {
    for (std::size_t l = 0; l < layers; ++l) {
        model::add_linear(store, fmt::format("{}.block{}.fc1", prefix, l), d, d, rng);
        model::add_linear(store, fmt::format("{}.block{}.fc2", prefix, l), d, d, rng);
    }
}

// Residual per-unit MLP blocks: h + fc2(gelu(fc1(h))).
Tensor run_blocks(Tape& tape, const ParamStore& store, const std::string& prefix, std::size_t layers, Tensor h) {
    for (std::size_t l = 0; l < layers; ++l) {
        const Tensor inner = ad::gelu(tape, apply_linear(tape, store, h, fmt::format("{}.block{}.fc1", prefix, l)));
        h = ad::add(tape, h, apply_linear(tape, store, inner, fmt::format("{}.block{}.fc2", prefix, l)));
    }
    return h;
}

std::size_t image_channels(Modality m) { return m == Modality::image2d_rgb ? 3 : 1; }

Tensor positional_rows(const std::vector<std::vector<std::size_t>>& coords, std::size_t width) {
    std::vector<float> v;
    v.reserve(coords.size() * width);
    for (const auto& c : coords) {
        const auto code = positional_code(c, width);
        v.insert(v.end(), code.begin(), code.end());
    }
    return Tensor::from({coords.size(), width}, std::move(v));
}

std::vector<std::size_t> unit_coord(std::size_t unit, const std::vector<std::size_t>& grid) {
    std::vector<std::size_t> c(grid.size());
    for (std::size_t a = grid.size(); a-- > 0;) {
        c[a] = unit % grid[a];
        unit /= grid[a];
    }
    return c;
}

// Patches (2D) or tubelets (3D) of an aligned array, flattened in
// [spatial..., channel] order.
EncoderOutput encode_spatial(Tape& tape, const ParamStore& store, const EncoderConfig& cfg, const data::Sample& s,
                             const masking::MaskedView* view) {
    const data::NdArray* aligned_ptr = nullptr;
    data::NdArray resized;
    std::vector<std::size_t> units;
    if (view != nullptr) {
        aligned_ptr = std::visit(
            [](const auto& p) -> const data::NdArray* {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, data::ImagePayload>) {
                    return &p.pixels;
                } else if constexpr (std::is_same_v<T, data::VolumePayload>) {
                    return &p.voxels;
                } else {
                    return nullptr;
                }
            },
            view->visible_payload);
        if (view->mask.patch != cfg.patch) {
            fail(ErrorKind::configuration,
                 fmt::format("mask patch {} does not match encoder patch {}", view->mask.patch, cfg.patch));
        }
        units = view->visible_units;
    } else {
        const auto& raw = s.modality == Modality::volume3d ? std::get<data::VolumePayload>(s.payload).voxels
                                                           : std::get<data::ImagePayload>(s.payload).pixels;
        resized = data::resize_to_patch_multiple(raw, cfg.patch);
        aligned_ptr = &resized;
    }
    if (aligned_ptr == nullptr) {
        fail(ErrorKind::usage, fmt::format("masked view of {} does not carry a spatial payload", s.id));
    }
    const data::NdArray& a = *aligned_ptr;
    const std::size_t spatial = a.shape.size() - 1;
    const std::size_t channels = a.shape.back();
    const std::size_t want_channels =
        s.modality == Modality::volume3d ? cfg.volume_channels : image_channels(s.modality);
    if (channels != want_channels) {
        fail(ErrorKind::configuration, fmt::format("{} encoder expects {} channel(s), sample {} has {}",
                                                   data::to_string(s.modality), want_channels, s.id, channels));
    }
    std::vector<std::size_t> grid;
    std::size_t total = 1;
    for (std::size_t ax = 0; ax < spatial; ++ax) {
        if (a.shape[ax] % cfg.patch != 0) {
            fail(ErrorKind::configuration,
                 fmt::format("sample {}: axis {} of size {} is not divisible by patch {}", s.id, ax, a.shape[ax],
                             cfg.patch));
        }
        grid.push_back(a.shape[ax] / cfg.patch);
        total *= grid.back();
    }
    if (view == nullptr) {
        units.resize(total);
        std::iota(units.begin(), units.end(), 0);
    }

    EncoderOutput out;
    out.modality = s.modality;
    out.unit_ids = units;
    if (units.empty()) {
        return out;
    }
    const std::size_t p = cfg.patch;
    const std::size_t cells_per_unit = spatial == 2 ? p * p : p * p * p;
    const std::size_t unit_dim = cells_per_unit * channels;
    std::vector<float> flat;
    flat.reserve(units.size() * unit_dim);
    std::vector<std::vector<std::size_t>> coords;
    for (auto u : units) {
        const auto c = unit_coord(u, grid);
        coords.push_back(c);
        if (spatial == 2) {
            const std::size_t w = a.shape[1];
            for (std::size_t y = 0; y < p; ++y) {
                const float* row = &a.values[((c[0] * p + y) * w + c[1] * p) * channels];
                flat.insert(flat.end(), row, row + p * channels);
            }
        } else {
            const std::size_t h = a.shape[1], w = a.shape[2];
            for (std::size_t z = 0; z < p; ++z) {
                for (std::size_t y = 0; y < p; ++y) {
                    const float* row = &a.values[(((c[0] * p + z) * h + c[1] * p + y) * w + c[2] * p) * channels];
                    flat.insert(flat.end(), row, row + p * channels);
                }
            }
        }
    }
    const std::string prefix = encoder_prefix(s.modality);
    const Tensor x = Tensor::from({units.size(), unit_dim}, std::move(flat));
    Tensor h = apply_linear(tape, store, x, prefix + ".embed");
    h = run_blocks(tape, store, prefix, layers_for(cfg, s.modality), h);
    out.content = h;
    out.units = ad::add(tape, h, positional_rows(coords, cfg.d_enc));
    return out;
}

struct GridInput {
    const data::NdArray* cells;
    data::NdArray presence;
};

GridInput grid_input(const data::Sample& s, const masking::MaskedView* view) {
    GridInput in;
    const data::Payload& payload = view != nullptr ? view->visible_payload : s.payload;
    if (const auto* tab = std::get_if<data::TablePayload>(&payload)) {
        in.cells = &tab->cells;
    } else if (const auto* tc = std::get_if<data::TimecoursePayload>(&payload)) {
        in.cells = &tc->series;
    } else {
        fail(ErrorKind::usage, fmt::format("sample {} has no row/column payload", s.id));
    }
    if (view != nullptr) {
        if (view->presence.shape != in.cells->shape) {
            fail(ErrorKind::validation, fmt::format("presence flags {} are not aligned with payload {} of {}",
                                                    ad::shape_string(view->presence.shape),
                                                    ad::shape_string(in.cells->shape), s.id));
        }
        in.presence = view->presence;
    } else {
        in.presence = data::NdArray{in.cells->shape, std::vector<float>(in.cells->values.size(), 1.0f)};
    }
    return in;
}

EncoderOutput encode_tabular(Tape& tape, const ParamStore& store, const EncoderConfig& cfg, const data::Sample& s,
                             const masking::MaskedView* view) {
    const GridInput in = grid_input(s, view);
    const std::size_t rows = in.cells->shape[0], cols = in.cells->shape[1];
    if (rows == 0 || cols == 0) {
        fail(ErrorKind::validation, fmt::format("sample {}: empty table", s.id));
    }
    const auto& columns = std::get<data::TablePayload>(s.payload).columns;

    // Rows are unordered records: a canonical lexicographic order makes the
    // pooled summary exactly invariant to row permutations.
    std::vector<std::size_t> order(rows);
    std::iota(order.begin(), order.end(), 0);
    auto key = [&](std::size_t r, std::size_t c) {
        return std::pair{in.presence.values[r * cols + c], in.cells->values[r * cols + c]};
    };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (key(a, c) != key(b, c)) {
                return key(a, c) < key(b, c);
            }
        }
        return false;
    });
    std::vector<float> vals(rows * cols), pres(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < cols; ++c) {
            pres[i * cols + c] = in.presence.values[order[i] * cols + c];
            vals[i * cols + c] = in.cells->values[order[i] * cols + c] * pres[i * cols + c];
        }
    }
    std::vector<std::int32_t> buckets;
    for (const auto& name : columns) {
        buckets.push_back(static_cast<std::int32_t>(column_bucket(name, cfg.table_hash_buckets)));
    }
    const std::string prefix = encoder_prefix(Modality::tabular);
    const Tensor value_emb = ad::embedding(tape, store.get(prefix + ".column_value"), buckets);
    const Tensor presence_emb = ad::embedding(tape, store.get(prefix + ".column_presence"), buckets);
    Tensor h = ad::add(tape, ad::matmul(tape, Tensor::from({rows, cols}, std::move(vals)), value_emb),
                       ad::matmul(tape, Tensor::from({rows, cols}, std::move(pres)), presence_emb));
    h = ad::add_row(tape, h, store.get(prefix + ".cell_bias"));
    h = apply_linear(tape, store, ad::gelu(tape, h), prefix + ".row");
    h = run_blocks(tape, store, prefix, cfg.tabular_layers, h);
    const Tensor weights = ad::softmax(tape, apply_linear(tape, store, h, prefix + ".pool"), 0);
    EncoderOutput out;
    out.modality = Modality::tabular;
    out.units = ad::matmul(tape, ad::transpose(tape, weights), h);
    out.unit_ids = {0};
    return out;
}

EncoderOutput encode_timecourse(Tape& tape, const ParamStore& store, const EncoderConfig& cfg,
                                const data::Sample& s, const masking::MaskedView* view) {
    const GridInput in = grid_input(s, view);
    const std::size_t steps = in.cells->shape[0], features = in.cells->shape[1];
    if (features > cfg.max_series_features) {
        fail(ErrorKind::configuration, fmt::format("sample {} has {} features; the timecourse encoder takes at most {}",
                                                   s.id, features, cfg.max_series_features));
    }
    std::vector<float> vals(steps * features);
    std::vector<std::uint8_t> masked_step(steps, 0);
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t f = 0; f < features; ++f) {
            vals[t * features + f] = in.cells->values[t * features + f] * in.presence.values[t * features + f];
        }
        masked_step[t] = view != nullptr && view->mask.row_masked.at(t);
    }
    const std::string prefix = encoder_prefix(Modality::timecourse);
    const Tensor value_emb = ad::slice_rows(tape, store.get(prefix + ".feature_value"), 0, features);
    const Tensor presence_emb = ad::slice_rows(tape, store.get(prefix + ".feature_presence"), 0, features);
    Tensor h = ad::add(tape, ad::matmul(tape, Tensor::from({steps, features}, std::move(vals)), value_emb),
                       ad::matmul(tape, Tensor::from(in.presence.shape, in.presence.values), presence_emb));
    h = ad::add_row(tape, h, store.get(prefix + ".step_bias"));
    h = apply_linear(tape, store, ad::gelu(tape, h), prefix + ".embed");
    h = run_blocks(tape, store, prefix, cfg.timecourse_layers, h);
    h = ad::replace_rows(tape, h, store.get(prefix + ".mask_vector"), masked_step);
    std::vector<std::vector<std::size_t>> coords;
    EncoderOutput out;
    out.modality = Modality::timecourse;
    for (std::size_t t = 0; t < steps; ++t) {
        coords.push_back({t});
        out.unit_ids.push_back(t);
    }
    out.units = ad::add(tape, h, positional_rows(coords, cfg.d_enc));
    return out;
}

}  // namespace

std::vector<float> positional_code(const std::vector<std::size_t>& coord, std::size_t width) {
    std::vector<float> code(width, 0.0f);
    const std::size_t axes = coord.size();
    // Even-sized slice per axis; the last axis takes the remainder.
    const std::size_t per_axis = width / axes / 2 * 2;
    std::size_t offset = 0;
    for (std::size_t a = 0; a < axes; ++a) {
        const std::size_t len = a + 1 == axes ? width - offset : per_axis;
        const double pos = static_cast<double>(coord[a]);
        for (std::size_t i = 0; i < len; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(len));
            code[offset + i] = static_cast<float>(std::sin(pos * freq));
            if (i + 1 < len) {
                code[offset + i + 1] = static_cast<float>(std::cos(pos * freq));
            }
        }
        offset += len;
    }
    return code;
}

std::size_t column_bucket(const std::string& name, std::size_t buckets) {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : name) {
        h = (h ^ c) * 16777619u;
    }
    return h % buckets;
}

void register_params(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    validate(cfg);
    const std::size_t d = cfg.d_enc, p = cfg.patch;
    for (auto m : {Modality::image2d_gray, Modality::image2d_rgb}) {
        model::add_linear(store, encoder_prefix(m) + ".embed", p * p * image_channels(m), d, rng);
        add_blocks(store, encoder_prefix(m), cfg.image_layers, d, rng);
    }
    model::add_linear(store, encoder_prefix(Modality::volume3d) + ".embed", p * p * p * cfg.volume_channels, d, rng);
    add_blocks(store, encoder_prefix(Modality::volume3d), cfg.volume_layers, d, rng);

    const std::string tab = encoder_prefix(Modality::tabular);
    const float table_scale = 1.0f / std::sqrt(static_cast<float>(d));
    store.add(tab + ".column_value", model::normal_tensor({cfg.table_hash_buckets, d}, table_scale, rng));
    store.add(tab + ".column_presence", model::normal_tensor({cfg.table_hash_buckets, d}, table_scale, rng));
    store.add(tab + ".cell_bias", Tensor::zeros({d}, true));
    model::add_linear(store, tab + ".row", d, d, rng);
    add_blocks(store, tab, cfg.tabular_layers, d, rng);
    model::add_linear(store, tab + ".pool", d, 1, rng);

    const std::string tc = encoder_prefix(Modality::timecourse);
    store.add(tc + ".feature_value", model::normal_tensor({cfg.max_series_features, d}, table_scale, rng));
    store.add(tc + ".feature_presence", model::normal_tensor({cfg.max_series_features, d}, table_scale, rng));
    store.add(tc + ".step_bias", Tensor::zeros({d}, true));
    model::add_linear(store, tc + ".embed", d, d, rng);
    add_blocks(store, tc, cfg.timecourse_layers, d, rng);
    store.add(tc + ".mask_vector", model::normal_tensor({1, d}, 0.02f, rng));

    for (auto m : data::kAllModalities) {
        store.add(special_name(m), model::normal_tensor({1, cfg.d_model}, 0.02f, rng));
    }
    model::add_linear(store, "projector.fc1", d, cfg.d_model, rng);
    model::add_linear(store, "projector.fc2", cfg.d_model, cfg.d_model, rng);
}

EncoderOutput encode(Tape& tape, const ParamStore& store, const EncoderConfig& cfg, const data::Sample& s,
                     const masking::MaskedView* view) {
    if (view != nullptr && view->origin_sample_id != s.id) {
        fail(ErrorKind::usage, fmt::format("masked view of {} passed with sample {}", view->origin_sample_id, s.id));
    }
    switch (s.modality) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb:
    case Modality::volume3d: return encode_spatial(tape, store, cfg, s, view);
    case Modality::tabular: return encode_tabular(tape, store, cfg, s, view);
    case Modality::timecourse: return encode_timecourse(tape, store, cfg, s, view);
    }
    fail(ErrorKind::usage, "unknown modality");
}

MediaTokens project(Tape& tape, const ParamStore& store, const EncoderOutput& enc, Modality modality) {
    if (enc.modality != modality) {
        fail(ErrorKind::usage, fmt::format("project: encoder output is {} but routing was asked for {}",
                                           data::to_string(enc.modality), data::to_string(modality)));
    }
    const Tensor& special = store.get(special_name(modality));
    if (!enc.units.defined()) {
        return {special, Provenance::special_only};
    }
    const Tensor hidden = ad::gelu(tape, apply_linear(tape, store, enc.units, "projector.fc1"));
    const Tensor projected = apply_linear(tape, store, hidden, "projector.fc2");
    if (modality == Modality::tabular) {
        return {ad::add(tape, special, projected), Provenance::special_only};
    }
    const Tensor parts[] = {special, projected};
    return {ad::concat_rows(tape, parts), Provenance::special_plus_visible};
}

}  // namespace m3f::encoders
