#include "data/augment.hpp"

#include <algorithm>
#include <cmath>

namespace m3f::data {

namespace {

constexpr float kNoise = 0.02f;

// Mirrors the last spatial axis of an [... x W x C] array.
void flip_width(NdArray& a) {
    const std::size_t c = a.shape.back();
    const std::size_t w = a.shape[a.shape.size() - 2];
    const std::size_t lines = a.values.size() / (w * c);
    for (std::size_t l = 0; l < lines; ++l) {
        float* row = a.values.data() + l * w * c;
        for (std::size_t x = 0; x < w / 2; ++x) {
            for (std::size_t k = 0; k < c; ++k) {
                std::swap(row[x * c + k], row[(w - 1 - x) * c + k]);
            }
        }
    }
}

void jitter_spatial(NdArray& a, Rng& rng) {
    if (rng.uniform() < 0.5) {
        flip_width(a);
    }
    for (auto& v : a.values) {
        v = std::clamp(v + kNoise * static_cast<float>(rng.normal()), 0.0f, 1.0f);
    }
}

}  // namespace

Sample augment(const Sample& sample, Rng& rng) {
    Sample out = sample;
    if (auto* img = std::get_if<ImagePayload>(&out.payload)) {
        jitter_spatial(img->pixels, rng);
    } else if (auto* vol = std::get_if<VolumePayload>(&out.payload)) {
        jitter_spatial(vol->voxels, rng);
    } else if (auto* tab = std::get_if<TablePayload>(&out.payload)) {
        auto& cells = tab->cells;
        const std::size_t rows = cells.shape[0], cols = cells.shape[1];
        for (std::size_t c = 0; c < cols; ++c) {
            double mean = 0.0, sq = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                mean += cells.values[r * cols + c];
            }
            mean /= static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                const double d = cells.values[r * cols + c] - mean;
                sq += d * d;
            }
            const double sd = std::sqrt(sq / static_cast<double>(rows));
            const auto offset = static_cast<float>(kNoise * sd * rng.normal());
            for (std::size_t r = 0; r < rows; ++r) {
                cells.values[r * cols + c] += offset;
            }
        }
    } else if (auto* tc = std::get_if<TimecoursePayload>(&out.payload)) {
        auto& s = tc->series;
        const std::size_t steps = s.shape[0], features = s.shape[1];
        const auto shift = static_cast<long>(rng.uniform_index(3)) - 1;
        const auto original = s.values;
        for (std::size_t t = 0; t < steps; ++t) {
            const long src = std::clamp(static_cast<long>(t) - shift, 0L, static_cast<long>(steps) - 1);
            std::copy_n(original.begin() + src * static_cast<long>(features), features,
                        s.values.begin() + static_cast<long>(t * features));
        }
    }
    return out;
}

}  // namespace m3f::data
