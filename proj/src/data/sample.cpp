#include "data/sample.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::data {

std::string_view to_string(Modality m) {
    switch (m) {
    case Modality::image2d_gray: return "image2d_gray";
    case Modality::image2d_rgb: return "image2d_rgb";
    case Modality::volume3d: return "volume3d";
    case Modality::tabular: return "tabular";
    case Modality::timecourse: return "timecourse";
    }
    return "unknown";
}

Modality parse_modality(std::string_view name) {
    for (auto m : kAllModalities) {
        if (to_string(m) == name) {
            return m;
        }
    }
    fail(ErrorKind::validation, fmt::format("unknown modality \"{}\"", name));
}

namespace {

void check_array(const NdArray& a, std::size_t rank, const Sample& s, std::string_view what) {
    if (a.shape.size() != rank) {
        fail(ErrorKind::validation, fmt::format("sample {}: modality {} expects a rank-{} {} payload, got {}", s.id,
                                                to_string(s.modality), rank, what, ad::shape_string(a.shape)));
    }
    for (auto d : a.shape) {
        if (d == 0) {
            fail(ErrorKind::validation, fmt::format("sample {}: empty {} payload", s.id, what));
        }
    }
    if (ad::element_count(a.shape) != a.values.size()) {
        fail(ErrorKind::validation, fmt::format("sample {}: payload shape {} holds {} values, got {}", s.id,
                                                ad::shape_string(a.shape), ad::element_count(a.shape), a.values.size()));
    }
    for (float v : a.values) {
        if (!std::isfinite(v)) {
            fail(ErrorKind::validation, fmt::format("sample {}: non-finite payload value", s.id));
        }
    }
}

}  // namespace

void validate_sample(const Sample& s) {
    if (s.id.empty()) {
        fail(ErrorKind::validation, "sample id must be non-empty");
    }
    if (s.class_label.empty()) {
        fail(ErrorKind::validation, fmt::format("sample {}: class_label must be non-empty", s.id));
    }
    auto mismatch = [&](std::string_view got) {
        fail(ErrorKind::validation,
             fmt::format("sample {}: modality {} does not accept a {} payload", s.id, to_string(s.modality), got));
    };
    switch (s.modality) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb: {
        const auto* img = std::get_if<ImagePayload>(&s.payload);
        if (img == nullptr) {
            mismatch("non-image");
        }
        check_array(img->pixels, 3, s, "image");
        const std::size_t want = s.modality == Modality::image2d_gray ? 1 : 3;
        if (img->pixels.shape[2] != want) {
            fail(ErrorKind::validation, fmt::format("sample {}: {} expects {} channel(s), got {}", s.id,
                                                    to_string(s.modality), want, img->pixels.shape[2]));
        }
        break;
    }
    case Modality::volume3d: {
        const auto* vol = std::get_if<VolumePayload>(&s.payload);
        if (vol == nullptr) {
            mismatch("non-volume");
        }
        check_array(vol->voxels, 4, s, "volume");
        break;
    }
    case Modality::tabular: {
        const auto* tab = std::get_if<TablePayload>(&s.payload);
        if (tab == nullptr) {
            mismatch("non-table");
        }
        check_array(tab->cells, 2, s, "table");
        if (tab->columns.size() != tab->cells.shape[1]) {
            fail(ErrorKind::validation, fmt::format("sample {}: {} column names for {} columns", s.id,
                                                    tab->columns.size(), tab->cells.shape[1]));
        }
        break;
    }
    case Modality::timecourse: {
        const auto* tc = std::get_if<TimecoursePayload>(&s.payload);
        if (tc == nullptr) {
            mismatch("non-timecourse");
        }
        check_array(tc->series, 2, s, "timecourse");
        if (tc->timestamps.size() != tc->series.shape[0]) {
            fail(ErrorKind::validation, fmt::format("sample {}: {} timestamps for {} time points", s.id,
                                                    tc->timestamps.size(), tc->series.shape[0]));
        }
        break;
    }
    }
}

Dataset::Dataset(std::vector<Sample> samples) : samples_(std::move(samples)) {
    for (std::size_t i = 0; i < samples_.size(); ++i) {
        const auto& s = samples_[i];
        validate_sample(s);
        if (!ids_.emplace(s.id, i).second) {
            fail(ErrorKind::validation, "duplicate sample id " + s.id);
        }
        auto [it, inserted] = index_.try_emplace(s.class_label);
        if (inserted) {
            classes_.push_back(s.class_label);
        }
        it->second.push_back(i);
    }
}

std::span<const std::size_t> Dataset::members(const std::string& label) const {
    const auto it = index_.find(label);
    if (it == index_.end()) {
        return {};
    }
    return it->second;
}

std::optional<std::size_t> Dataset::find(const std::string& id) const {
    const auto it = ids_.find(id);
    if (it == ids_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::vector<std::string> Dataset::class_size_warnings() const {
    std::vector<std::string> out;
    for (const auto& label : classes_) {
        const auto n = index_.at(label).size();
        if (n < kMinPerClass || n > kMaxPerClass) {
            out.push_back(fmt::format("class \"{}\" has {} samples; few-shot classes hold {}-{}", label, n,
                                      kMinPerClass, kMaxPerClass));
        }
    }
    return out;
}

Dataset Dataset::subset(std::span<const std::string> labels) const {
    std::vector<Sample> picked;
    for (const auto& s : samples_) {
        if (std::find(labels.begin(), labels.end(), s.class_label) != labels.end()) {
            picked.push_back(s);
        }
    }
    return Dataset(std::move(picked));
}

namespace {

struct Fnv {
    std::uint64_t h = 0xcbf29ce484222325ull;
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h = (h ^ c[i]) * 0x100000001b3ull;
        }
    }
    void text(std::string_view s) {
        const std::uint64_t n = s.size();
        bytes(&n, sizeof n);
        bytes(s.data(), s.size());
    }
    void array(const NdArray& a) {
        for (auto d : a.shape) {
            const std::uint64_t v = d;
            bytes(&v, sizeof v);
        }
        bytes(a.values.data(), a.values.size() * sizeof(float));
    }
};

}  // namespace

std::string fingerprint(const Dataset& ds) {
    Fnv f;
    for (const auto& s : ds.samples()) {
        f.text(s.id);
        f.text(s.class_label);
        f.text(to_string(s.modality));
        f.text(s.description.value_or(std::string("\0none")));
        std::visit(
            [&](const auto& p) {
                using P = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<P, ImagePayload>) {
                    f.array(p.pixels);
                } else if constexpr (std::is_same_v<P, VolumePayload>) {
                    f.array(p.voxels);
                } else if constexpr (std::is_same_v<P, TablePayload>) {
                    for (const auto& c : p.columns) {
                        f.text(c);
                    }
                    f.array(p.cells);
                } else {
                    f.bytes(p.timestamps.data(), p.timestamps.size() * sizeof(float));
                    f.array(p.series);
                }
            },
            s.payload);
        for (const auto& [k, v] : s.meta) {
            f.text(k);
            f.text(v);
        }
    }
    return fmt::format("{:016x}", f.h);
}

}  // namespace m3f::data
