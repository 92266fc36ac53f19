#include "autodiff/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::ad {

namespace {

constexpr std::array<char, 4> kMagic{'M', '3', 'F', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> bytes{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                    static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    out.write(bytes.data(), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// Reads exactly n bytes or raises a parse error stating expected vs actual.
void read_exact(std::istream& in, unsigned char* dst, std::size_t n, std::size_t offset, const std::string& source) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got != n) {
        fail(ErrorKind::parse, fmt::format("{}: truncated tensor record, expected {} bytes at offset {} but read {}",
                                           source, n, offset, got));
    }
}

}  // namespace

void write_tensor(std::ostream& out, const Shape& shape, std::span<const float> values) {
    if (shape.empty() || shape.size() > 255 || element_count(shape) != values.size()) {
        fail(ErrorKind::dimension, "cannot serialize tensor of shape " + shape_string(shape));
    }
    out.write(kMagic.data(), 4);
    out.put(static_cast<char>(kTensorFormatVersion));
    out.put(static_cast<char>(kDtypeFloat32));
    out.put(static_cast<char>(shape.size()));
    for (auto d : shape) {
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    std::vector<char> payload(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        payload[4 * i + 0] = static_cast<char>(bits & 0xFF);
        payload[4 * i + 1] = static_cast<char>((bits >> 8) & 0xFF);
        payload[4 * i + 2] = static_cast<char>((bits >> 16) & 0xFF);
        payload[4 * i + 3] = static_cast<char>((bits >> 24) & 0xFF);
    }
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

void write_tensor(std::ostream& out, const Tensor& tensor) {
    write_tensor(out, tensor.shape(), tensor.values());
}

void write_tensor_file(const std::filesystem::path& path, const Shape& shape, std::span<const float> values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
    }
    write_tensor(out, shape, values);
    if (!out) {
        fail(ErrorKind::io, "failed writing " + path.string());
    }
}

RawTensor read_tensor(std::istream& in, const std::string& source) {
    std::array<unsigned char, 7> header{};
    read_exact(in, header.data(), header.size(), 0, source);
    if (std::memcmp(header.data(), kMagic.data(), 4) != 0) {
        fail(ErrorKind::parse, source + ": bad magic, expected \"M3FT\"");
    }
    if (header[4] != kTensorFormatVersion) {
        fail(ErrorKind::parse, fmt::format("{}: unsupported tensor format version {}", source, header[4]));
    }
    if (header[5] != kDtypeFloat32) {
        fail(ErrorKind::parse, fmt::format("{}: unsupported dtype code {}", source, header[5]));
    }
    const std::size_t rank = header[6];
    if (rank == 0) {
        fail(ErrorKind::parse, source + ": rank 0 tensor record");
    }
    std::vector<unsigned char> dims_raw(rank * 4);
    read_exact(in, dims_raw.data(), dims_raw.size(), header.size(), source);
    RawTensor t;
    for (std::size_t i = 0; i < rank; ++i) {
        const auto d = get_u32(dims_raw.data() + 4 * i);
        if (d == 0) {
            fail(ErrorKind::parse, source + ": zero-sized dimension");
        }
        t.shape.push_back(d);
    }
    const std::size_t count = element_count(t.shape);
    std::vector<unsigned char> payload(count * 4);
    read_exact(in, payload.data(), payload.size(), header.size() + dims_raw.size(), source);
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        t.values[i] = std::bit_cast<float>(get_u32(payload.data() + 4 * i));
    }
    return t;
}

RawTensor read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open tensor file " + path.string());
    }
    return read_tensor(in, path.string());
}

std::vector<RawTensor> read_tensor_segment(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open tensor segment " + path.string());
    }
    std::vector<RawTensor> out;
    while (in.peek() != std::char_traits<char>::eof()) {
        out.push_back(read_tensor(in, path.string()));
    }
    return out;
}

}  // namespace m3f::ad
