#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "model/params.hpp"

namespace m3f::train {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float clip_norm = 1.0f;  // global gradient norm; <= 0 disables clipping
};

struct Moments {
    std::vector<float> m;
    std::vector<float> v;
};

struct OptimizerState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::unordered_map<std::string, Moments> moments;
};

struct StepReport {
    double grad_norm = 0.0;  // before clipping
    double clip_scale = 1.0;
};

/// Adam with bias correction over `names`, after scaling all gradients so
/// their global norm is at most clip_norm. Parameters without an accumulated
/// gradient are skipped (moments untouched). Training error naming the parameter on a non-finite
/// gradient; nothing is updated in that case.
StepReport optimize_step(model::ParamStore& store, const std::vector<std::string>& names, OptimizerState& state);

}  // namespace m3f::train
