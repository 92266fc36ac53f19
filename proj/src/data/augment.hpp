#pragma once

#include "common/rng.hpp"
#include "data/sample.hpp"

namespace m3f::data {

/// Input jitter for the augmentation arm:
///   images/volumes: horizontal flip with probability 0.5, then N(0, 0.02) noise clamped to [0, 1]
///   tables: one N(0, 0.02 * column std) offset per column
///   timecourses: shift by -1, 0 or +1 steps with edge replication
/// The result keeps the sample's id, label and shape.
Sample augment(const Sample& sample, Rng& rng);

}  // namespace m3f::data
