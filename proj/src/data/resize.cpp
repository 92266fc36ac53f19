#include "data/resize.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"

namespace m3f::data {

std::size_t patch_aligned(std::size_t n, std::size_t patch) {
    if (patch == 0) {
        fail(ErrorKind::configuration, "patch size must be positive");
    }
    const std::size_t down = n / patch * patch;
    const std::size_t up = down + patch;
    if (down == 0) {
        return patch;
    }
    return n - down < up - n ? down : up;
}

namespace {

// Half-pixel-centre linear interpolation along one axis.
NdArray resize_axis(const NdArray& in, std::size_t axis, std::size_t out_len) {
    const std::size_t in_len = in.shape[axis];
    if (in_len == out_len) {
        return in;
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t a = 0; a < axis; ++a) {
        outer *= in.shape[a];
    }
    for (std::size_t a = axis + 1; a < in.shape.size(); ++a) {
        inner *= in.shape[a];
    }
    NdArray out;
    out.shape = in.shape;
    out.shape[axis] = out_len;
    out.values.assign(outer * out_len * inner, 0.0f);
    const double scale = static_cast<double>(in_len) / static_cast<double>(out_len);
    for (std::size_t j = 0; j < out_len; ++j) {
        const double src = std::clamp((static_cast<double>(j) + 0.5) * scale - 0.5, 0.0,
                                      static_cast<double>(in_len - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        const std::size_t hi = std::min(lo + 1, in_len - 1);
        const auto t = static_cast<float>(src - static_cast<double>(lo));
        for (std::size_t o = 0; o < outer; ++o) {
            const float* a = &in.values[(o * in_len + lo) * inner];
            const float* b = &in.values[(o * in_len + hi) * inner];
            float* dst = &out.values[(o * out_len + j) * inner];
            for (std::size_t i = 0; i < inner; ++i) {
                dst[i] = a[i] + t * (b[i] - a[i]);
            }
        }
    }
    return out;
}

}  // namespace

NdArray resize_to_patch_multiple(const NdArray& array, std::size_t patch) {
    if (array.shape.size() < 2) {
        fail(ErrorKind::dimension, "resize expects a spatial array with a channel axis");
    }
    NdArray out = array;
    for (std::size_t axis = 0; axis + 1 < array.shape.size(); ++axis) {
        out = resize_axis(out, axis, patch_aligned(array.shape[axis], patch));
    }
    return out;
}

}  // namespace m3f::data
