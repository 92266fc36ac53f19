#pragma once

#include <cstddef>

#include "data/sample.hpp"

namespace m3f::data {

// Nearest positive multiple of `patch` to `n` (ties round up).
std::size_t patch_aligned(std::size_t n, std::size_t patch);

/// Separable linear resize (bilinear in 2D, trilinear in 3D) of the leading
/// spatial axes of an image (H x W x C) or volume (D x H x W x C) to the
/// nearest patch-divisible size. Returns the input unchanged when already
/// aligned.
NdArray resize_to_patch_multiple(const NdArray& array, std::size_t patch);

}  // namespace m3f::data
