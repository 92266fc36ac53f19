#pragma once

// Central finite-difference oracle. It perturbs leaf values in place and
// re-evaluates the forward on a non-recording tape, so it never touches the
// backward rules it is checking.

#include <cmath>
#include <functional>
#include <vector>

#include "autodiff/ops.hpp"
#include "common/rng.hpp"

namespace m3f::testing {

struct GradCheckResult {
    double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double max_abs_error = 0.0;
    std::size_t checked = 0;
};

// `forward` builds an output tensor of any shape. The scalar being
// differentiated is sum(output * R) for a fixed random R in [-1, 1], which is
// evaluated in double on the oracle side.
inline GradCheckResult grad_check(const std::function<ad::Tensor(ad::Tape&)>& forward,
                                  std::vector<ad::Tensor> leaves, std::uint64_t seed, double step = 1e-2) {
    std::vector<float> weights;
    {
        ad::Tape probe(false);
        const auto out = forward(probe);
        Rng rng(seed);
        weights.resize(out.size());
        for (auto& w : weights) {
            w = rng.uniform(-1.0f, 1.0f);
        }
    }
    auto objective = [&]() {
        ad::Tape tape(false);
        const auto out = forward(tape);
        double total = 0.0;
        const auto v = out.values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            total += static_cast<double>(v[i]) * weights[i];
        }
        return total;
    };

    for (auto& leaf : leaves) {
        leaf.zero_grad();
    }
    {
        ad::Tape tape;
        const auto out = forward(tape);
        const auto r = ad::Tensor::from(out.shape(), weights);
        const auto loss = ad::sum(tape, ad::mul(tape, out, r));
        tape.backward(loss);
    }

    double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
    GradCheckResult result;
    for (auto& leaf : leaves) {
        std::vector<float> analytic(leaf.size(), 0.0f);
        if (leaf.has_grad()) {
            analytic.assign(leaf.grad().begin(), leaf.grad().end());
        }
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const float original = leaf.values()[i];
            // Four-point stencil at x-2h, x-h, x+h, x+2h. The derivative of the
            // interpolating cubic uses the offsets actually stored in float32.
            const double nominal[4] = {-2.0 * step, -step, step, 2.0 * step};
            double offset[4], value[4];
            for (int j = 0; j < 4; ++j) {
                const auto moved = static_cast<float>(original + nominal[j]);
                offset[j] = static_cast<double>(moved) - original;
                leaf.mutable_values()[i] = moved;
                value[j] = objective();
            }
            leaf.mutable_values()[i] = original;
            double numeric = 0.0;
            for (int j = 0; j < 4; ++j) {
                double weight = 0.0;
                for (int m = 0; m < 4; ++m) {
                    if (m == j) {
                        continue;
                    }
                    double term = 1.0 / (offset[j] - offset[m]);
                    for (int l = 0; l < 4; ++l) {
                        if (l != j && l != m) {
                            term *= -offset[l] / (offset[j] - offset[l]);
                        }
                    }
                    weight += term;
                }
                numeric += weight * value[j];
            }
            const double d = analytic[i] - numeric;
            diff_sq += d * d;
            analytic_sq += static_cast<double>(analytic[i]) * analytic[i];
            numeric_sq += numeric * numeric;
            result.max_abs_error = std::max(result.max_abs_error, std::abs(d));
            ++result.checked;
        }
    }
    const double denom = std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-12});
    result.relative_error = std::sqrt(diff_sq) / denom;
    return result;
}

inline ad::Tensor random_tensor(ad::Shape shape, Rng& rng, bool requires_grad = true, float lo = -1.0f,
                                float hi = 1.0f) {
    std::vector<float> v(ad::element_count(shape));
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
    }
    return ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace m3f::testing
