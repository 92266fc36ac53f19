#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "autodiff/tensor.hpp"

namespace m3f::data {

enum class Modality { image2d_gray, image2d_rgb, volume3d, tabular, timecourse };

inline constexpr std::array<Modality, 5> kAllModalities{Modality::image2d_gray, Modality::image2d_rgb,
                                                        Modality::volume3d, Modality::tabular,
                                                        Modality::timecourse};

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view name);

/// Plain row-major float array (not part of any autodiff graph).
struct NdArray {
    ad::Shape shape;
    std::vector<float> values;

    std::size_t size() const { return values.size(); }
    bool operator==(const NdArray&) const = default;
};

struct ImagePayload {
    NdArray pixels;  // H x W x C, C in {1, 3}, values in [0, 1]
    bool operator==(const ImagePayload&) const = default;
};

struct VolumePayload {
    NdArray voxels;  // D x H x W x C
    bool operator==(const VolumePayload&) const = default;
};

struct TablePayload {
    std::vector<std::string> columns;
    NdArray cells;  // R x F
    bool operator==(const TablePayload&) const = default;
};

struct TimecoursePayload {
    std::vector<float> timestamps;  // T
    NdArray series;                 // T x F
    bool operator==(const TimecoursePayload&) const = default;
};

using Payload = std::variant<ImagePayload, VolumePayload, TablePayload, TimecoursePayload>;

struct Sample {
    std::string id;
    Modality modality = Modality::tabular;
    std::string class_label;
    std::optional<std::string> description;
    Payload payload;
    std::map<std::string, std::string> meta;

    bool operator==(const Sample&) const = default;
};

/// Throws a validation error when the payload does not fit the modality, a
/// value is non-finite, or the label is empty.
void validate_sample(const Sample& sample);

/// Immutable collection of samples indexed by class label.
class Dataset {
public:
    Dataset() = default;
    explicit Dataset(std::vector<Sample> samples);

    std::span<const Sample> samples() const { return samples_; }
    const Sample& sample(std::size_t index) const { return samples_.at(index); }
    std::size_t size() const { return samples_.size(); }

    // Labels in order of first appearance.
    std::span<const std::string> classes() const { return classes_; }
    std::span<const std::size_t> members(const std::string& label) const;
    bool has_class(const std::string& label) const { return index_.contains(label); }
    std::optional<std::size_t> find(const std::string& id) const;

    /// Messages for classes whose size falls outside the 1..10 few-shot band.
    std::vector<std::string> class_size_warnings() const;

    /// Samples whose label is in `labels`, preserving order.
    Dataset subset(std::span<const std::string> labels) const;

    bool operator==(const Dataset& other) const { return samples_ == other.samples_; }

private:
    std::vector<Sample> samples_;
    std::vector<std::string> classes_;
    std::unordered_map<std::string, std::vector<std::size_t>> index_;
    std::unordered_map<std::string, std::size_t> ids_;
};

/// FNV-1a over ids, labels, modalities, descriptions and payload bytes, as hex.
std::string fingerprint(const Dataset& ds);

inline constexpr std::size_t kMinPerClass = 1;
inline constexpr std::size_t kMaxPerClass = 10;

}  // namespace m3f::data
