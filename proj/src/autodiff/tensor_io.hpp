#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "autodiff/tensor.hpp"

// "M3FT" binary tensor records: magic, u8 version (1), u8 dtype (0 = f32),
// u8 rank, little-endian u32 dims, little-endian f32 payload.
namespace m3f::ad {

inline constexpr std::uint8_t kTensorFormatVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;

struct RawTensor {
    Shape shape;
    std::vector<float> values;

    bool operator==(const RawTensor&) const = default;
};

void write_tensor(std::ostream& out, const Shape& shape, std::span<const float> values);
void write_tensor(std::ostream& out, const Tensor& tensor);
void write_tensor_file(const std::filesystem::path& path, const Shape& shape, std::span<const float> values);

// Reads one record. `source` names the stream in error messages.
RawTensor read_tensor(std::istream& in, const std::string& source);
RawTensor read_tensor_file(const std::filesystem::path& path);

// Segment files hold consecutive records.
std::vector<RawTensor> read_tensor_segment(const std::filesystem::path& path);

}  // namespace m3f::ad
