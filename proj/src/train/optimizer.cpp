#include "train/optimizer.hpp"

#include <cmath>

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::train {

StepReport optimize_step(model::ParamStore& store, const std::vector<std::string>& names, OptimizerState& state) {
    StepReport report;
    double sq = 0.0;
    for (const auto& name : names) {
        const auto& p = store.get(name);
        if (!p.has_grad()) {
            continue;
        }
        for (float g : p.grad()) {
            if (!std::isfinite(g)) {
                fail(ErrorKind::training, fmt::format("non-finite gradient in parameter {}", name));
            }
            sq += static_cast<double>(g) * g;
        }
    }
    report.grad_norm = std::sqrt(sq);
    const auto& cfg = state.config;
    if (cfg.clip_norm > 0.0f && report.grad_norm > cfg.clip_norm) {
        report.clip_scale = cfg.clip_norm / report.grad_norm;
    }
    ++state.step;
    const auto t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), t);
    const double c2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), t);
    const auto scale = static_cast<float>(report.clip_scale);
    for (const auto& name : names) {
        auto& p = store.get(name);
        if (!p.has_grad()) {
            continue;
        }
        auto& mom = state.moments[name];
        if (mom.m.size() != p.size()) {
            mom.m.assign(p.size(), 0.0f);
            mom.v.assign(p.size(), 0.0f);
        }
        const auto grad = p.grad();
        auto w = p.mutable_values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const float g = grad[i] * scale;
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0f - cfg.beta1) * g;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0f - cfg.beta2) * g * g;
            const double mhat = mom.m[i] / c1;
            const double vhat = mom.v[i] / c2;
            w[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
    return report;
}

}  // namespace m3f::train
