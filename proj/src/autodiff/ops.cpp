#include "autodiff/ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "autodiff/kernels.hpp"
#include "common/error.hpp"

namespace m3f::ad {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

void require_rank2(const Tensor& t, std::string_view op) {
    if (!t.defined() || t.rank() != 2) {
        fail(ErrorKind::dimension, fmt::format("{} expects a rank-2 tensor, got {}", op,
                                               t.defined() ? shape_string(t.shape()) : "<undefined>"));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::dimension,
             fmt::format("{} shape mismatch: {} vs {}", op, shape_string(a.shape()), shape_string(b.shape())));
    }
}

std::vector<float>& grad_of(const NodePtr& n) { return n->grad_buffer(); }

template <typename Fn>
Tensor elementwise_binary(Tape& tape, std::string_view name, const Tensor& a, const Tensor& b, Fn fn) {
    require_same_shape(a, b, name);
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<float> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fn(av[i], bv[i]);
    }
    return make_result(a.shape(), std::move(out), tape.wants({&a, &b}));
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        fail(ErrorKind::dimension, fmt::format("matmul inner dimensions disagree: {} x {}", shape_string(a.shape()),
                                               shape_string(b.shape())));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> c(m * n);
    kernels::gemm_nn(m, k, n, a.values().data(), b.values().data(), c.data(), false);
    const bool rec = tape.wants({&a, &b});
    Tensor out = make_result({m, n}, std::move(c), rec);
    if (rec) {
        tape.record("matmul", {a.id(), b.id()}, out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            const float* g = on->grad.data();
            if (an->requires_grad) {
                kernels::gemm_nt(m, n, k, g, bn->value.data(), grad_of(an).data(), true);
            }
            if (bn->requires_grad) {
                kernels::gemm_tn(k, m, n, an->value.data(), g, grad_of(bn).data(), true);
            }
        });
    }
    return out;
}

namespace {

// W^T for a rank-2 tensor, cached on the node until its values change.
const float* transposed_values(const Tensor& w) {
    auto& node = *w.node();
    if (node.transposed_version != node.version || node.transposed.size() != node.value.size()) {
        node.transposed.resize(node.value.size());
        kernels::transpose(w.dim(0), w.dim(1), node.value.data(), node.transposed.data());
        node.transposed_version = node.version;
    }
    return node.transposed.data();
}

}  // namespace

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank2(x, "linear");
    require_rank2(weight, "linear");
    const std::size_t m = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) {
        fail(ErrorKind::dimension, fmt::format("linear input {} does not match weight {}", shape_string(x.shape()),
                                               shape_string(weight.shape())));
    }
    if (bias.defined() && bias.size() != out_dim) {
        fail(ErrorKind::dimension, fmt::format("linear bias {} does not match weight {}",
                                               shape_string(bias.shape()), shape_string(weight.shape())));
    }
    std::vector<float> y(m * out_dim);
    kernels::gemm_nn(m, in, out_dim, x.values().data(), transposed_values(weight), y.data(), false);
    if (bias.defined()) {
        const auto bv = bias.values();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t o = 0; o < out_dim; ++o) {
                y[i * out_dim + o] += bv[o];
            }
        }
    }
    const bool rec = tape.wants({&x, &weight, &bias});
    Tensor out = make_result({m, out_dim}, std::move(y), rec);
    if (rec) {
        std::vector<std::uint64_t> ids{x.id(), weight.id()};
        if (bias.defined()) {
            ids.push_back(bias.id());
        }
        tape.record("linear", std::move(ids), out,
                    [xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : NodePtr{},
                     on = out.node(), m, in, out_dim] {
                        const float* g = on->grad.data();
                        if (xn->requires_grad) {
                            kernels::gemm_nn(m, out_dim, in, g, wn->value.data(), grad_of(xn).data(), true);
                        }
                        if (wn->requires_grad) {
                            kernels::gemm_tn(out_dim, m, in, g, xn->value.data(), grad_of(wn).data(), true);
                        }
                        if (bn && bn->requires_grad) {
                            auto& gb = grad_of(bn);
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t o = 0; o < out_dim; ++o) {
                                    gb[o] += g[i * out_dim + o];
                                }
                            }
                        }
                    });
    }
    return out;
}

Tensor transpose(Tape& tape, const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<float> t(r * c);
    kernels::transpose(r, c, a.values().data(), t.data());
    const bool rec = tape.wants({&a});
    Tensor out = make_result({c, r}, std::move(t), rec);
    if (rec) {
        tape.record("transpose", {a.id()}, out, [an = a.node(), on = out.node(), r, c] {
            std::vector<float> back(r * c);
            kernels::transpose(c, r, on->grad.data(), back.data());
            auto& ga = grad_of(an);
            for (std::size_t i = 0; i < back.size(); ++i) {
                ga[i] += back[i];
            }
        });
    }
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    Tensor out = elementwise_binary(tape, "add", a, b, [](float x, float y) { return x + y; });
    if (out.requires_grad()) {
        tape.record("add", {a.id(), b.id()}, out, [an = a.node(), bn = b.node(), on = out.node()] {
            for (const auto& n : {an, bn}) {
                if (n->requires_grad) {
                    auto& g = grad_of(n);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += on->grad[i];
                    }
                }
            }
        });
    }
    return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    Tensor out = elementwise_binary(tape, "sub", a, b, [](float x, float y) { return x - y; });
    if (out.requires_grad()) {
        tape.record("sub", {a.id(), b.id()}, out, [an = a.node(), bn = b.node(), on = out.node()] {
            if (an->requires_grad) {
                auto& g = grad_of(an);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += on->grad[i];
                }
            }
            if (bn->requires_grad) {
                auto& g = grad_of(bn);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] -= on->grad[i];
                }
            }
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    Tensor out = elementwise_binary(tape, "mul", a, b, [](float x, float y) { return x * y; });
    if (out.requires_grad()) {
        tape.record("mul", {a.id(), b.id()}, out, [an = a.node(), bn = b.node(), on = out.node()] {
            if (an->requires_grad) {
                auto& g = grad_of(an);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += on->grad[i] * bn->value[i];
                }
            }
            if (bn->requires_grad) {
                auto& g = grad_of(bn);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += on->grad[i] * an->value[i];
                }
            }
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, float factor) {
    const auto av = a.values();
    std::vector<float> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * factor;
    }
    const bool rec = tape.wants({&a});
    Tensor result = make_result(a.shape(), std::move(out), rec);
    if (rec) {
        tape.record("scale", {a.id()}, result, [an = a.node(), on = result.node(), factor] {
            auto& g = grad_of(an);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += on->grad[i] * factor;
            }
        });
    }
    return result;
}

Tensor add_row(Tape& tape, const Tensor& a, const Tensor& row) {
    require_rank2(a, "add_row");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (row.size() != n) {
        fail(ErrorKind::dimension,
             fmt::format("add_row: row {} does not match {}", shape_string(row.shape()), shape_string(a.shape())));
    }
    const auto av = a.values();
    const auto rv = row.values();
    std::vector<float> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = av[i * n + j] + rv[j];
        }
    }
    const bool rec = tape.wants({&a, &row});
    Tensor result = make_result({m, n}, std::move(out), rec);
    if (rec) {
        tape.record("add_row", {a.id(), row.id()}, result, [an = a.node(), rn = row.node(), on = result.node(), m, n] {
            if (an->requires_grad) {
                auto& g = grad_of(an);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += on->grad[i];
                }
            }
            if (rn->requires_grad) {
                auto& g = grad_of(rn);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        g[j] += on->grad[i * n + j];
                    }
                }
            }
        });
    }
    return result;
}

Tensor replace_rows(Tape& tape, const Tensor& a, const Tensor& row, std::span<const std::uint8_t> replace) {
    require_rank2(a, "replace_rows");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (row.size() != n || replace.size() != m) {
        fail(ErrorKind::dimension, fmt::format("replace_rows: row {} / flags {} do not match {}",
                                               shape_string(row.shape()), replace.size(), shape_string(a.shape())));
    }
    const auto av = a.values();
    const auto rv = row.values();
    std::vector<float> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = replace[i] ? rv[j] : av[i * n + j];
        }
    }
    const bool rec = tape.wants({&a, &row});
    Tensor result = make_result({m, n}, std::move(out), rec);
    if (rec) {
        std::vector<std::uint8_t> flags(replace.begin(), replace.end());
        tape.record("replace_rows", {a.id(), row.id()}, result,
                    [an = a.node(), rn = row.node(), on = result.node(), flags = std::move(flags), m, n] {
                        for (std::size_t i = 0; i < m; ++i) {
                            const auto& target = flags[i] ? rn : an;
                            if (!target->requires_grad) {
                                continue;
                            }
                            auto& g = grad_of(target);
                            const std::size_t offset = flags[i] ? 0 : i * n;
                            for (std::size_t j = 0; j < n; ++j) {
                                g[offset + j] += on->grad[i * n + j];
                            }
                        }
                    });
    }
    return result;
}

namespace {

// exp(x) for |x| <= 88 by range reduction to [-ln2/2, ln2/2] and a degree-6
// polynomial; within a few ulp of expf and branch-free so the loop vectorizes.
inline float exp_approx(float x) {
    const float n = std::floor(x * 1.44269504088896341f + 0.5f);
    const float r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const auto bits = static_cast<std::int32_t>(n) + 127;
    return p * std::bit_cast<float>(bits << 23);
}

inline float tanh_approx(float u) {
    const float a = std::min(std::abs(u), 9.0f);
    const float e = exp_approx(-2.0f * a);
    const float t = (1.0f - e) / (1.0f + e);
    return std::copysign(t, u);
}

}  // namespace

Tensor gelu(Tape& tape, const Tensor& x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
    constexpr float c = 0.044715f;
    const auto xv = x.values();
    std::vector<float> out(xv.size());
    std::vector<float> t(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const float v = xv[i];
        t[i] = tanh_approx(k * (v + c * v * v * v));
        out[i] = 0.5f * v * (1.0f + t[i]);
    }
    const bool rec = tape.wants({&x});
    Tensor result = make_result(x.shape(), std::move(out), rec);
    if (rec) {
        tape.record("gelu", {x.id()}, result, [xn = x.node(), on = result.node(), t = std::move(t)] {
            auto& g = grad_of(xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const float v = xn->value[i];
                const float d = 0.5f * (1.0f + t[i]) + 0.5f * v * (1.0f - t[i] * t[i]) * k * (1.0f + 3.0f * c * v * v);
                g[i] += on->grad[i] * d;
            }
        });
    }
    return result;
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        fail(ErrorKind::dimension, fmt::format("softmax axis {} out of range for {}", axis, shape_string(x.shape())));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= x.dim(i);
    }
    for (std::size_t i = axis + 1; i < x.rank(); ++i) {
        inner *= x.dim(i);
    }
    const std::size_t len = x.dim(axis);
    const auto xv = x.values();
    std::vector<float> y(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            float peak = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                peak = std::max(peak, xv[base + j * inner]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const float e = std::exp(xv[base + j * inner] - peak);
                y[base + j * inner] = e;
                total += e;
            }
            const double inv = 1.0 / total;
            for (std::size_t j = 0; j < len; ++j) {
                y[base + j * inner] = static_cast<float>(y[base + j * inner] * inv);
            }
        }
    }
    const bool rec = tape.wants({&x});
    Tensor result = make_result(x.shape(), std::move(y), rec);
    if (rec) {
        tape.record("softmax", {x.id()}, result, [xn = x.node(), on = result.node(), outer, inner, len] {
            auto& g = grad_of(xn);
            const auto& yv = on->value;
            const auto& gy = on->grad;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) {
                        dot += static_cast<double>(gy[base + j * inner]) * yv[base + j * inner];
                    }
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        g[idx] += static_cast<float>(yv[idx] * (gy[idx] - dot));
                    }
                }
            }
        });
    }
    return result;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    if (!(eps > 0.0f)) {
        fail(ErrorKind::validation, "layer_norm eps must be positive");
    }
    const std::size_t d = x.shape().back();
    if (gain.size() != d || bias.size() != d) {
        fail(ErrorKind::dimension, fmt::format("layer_norm gain {} / bias {} do not match {}",
                                               shape_string(gain.shape()), shape_string(bias.shape()),
                                               shape_string(x.shape())));
    }
    const std::size_t rows = x.size() / d;
    const auto xv = x.values();
    const auto gv = gain.values();
    const auto bv = bias.values();
    std::vector<float> y(xv.size());
    std::vector<float> xhat(xv.size());
    std::vector<float> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = xv.data() + r * d;
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            total += row[j];
        }
        const double mu = total / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<float>(inv);
        for (std::size_t j = 0; j < d; ++j) {
            const float h = static_cast<float>((row[j] - mu) * inv);
            xhat[r * d + j] = h;
            y[r * d + j] = h * gv[j] + bv[j];
        }
    }
    const bool rec = tape.wants({&x, &gain, &bias});
    Tensor result = make_result(x.shape(), std::move(y), rec);
    if (rec) {
        tape.record("layer_norm", {x.id(), gain.id(), bias.id()}, result,
                    [xn = x.node(), gn = gain.node(), bn = bias.node(), on = result.node(), xhat = std::move(xhat),
                     inv_std = std::move(inv_std), rows, d] {
                        const auto& gy = on->grad;
                        if (gn->requires_grad) {
                            auto& gg = grad_of(gn);
                            for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t j = 0; j < d; ++j) {
                                    gg[j] += gy[r * d + j] * xhat[r * d + j];
                                }
                            }
                        }
                        if (bn->requires_grad) {
                            auto& gb = grad_of(bn);
                            for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t j = 0; j < d; ++j) {
                                    gb[j] += gy[r * d + j];
                                }
                            }
                        }
                        if (xn->requires_grad) {
                            auto& gx = grad_of(xn);
                            for (std::size_t r = 0; r < rows; ++r) {
                                double sum_dh = 0.0, sum_dh_h = 0.0;
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double dh = static_cast<double>(gy[r * d + j]) * gn->value[j];
                                    sum_dh += dh;
                                    sum_dh_h += dh * xhat[r * d + j];
                                }
                                const double scale_r = inv_std[r] / static_cast<double>(d);
                                for (std::size_t j = 0; j < d; ++j) {
                                    const double dh = static_cast<double>(gy[r * d + j]) * gn->value[j];
                                    gx[r * d + j] += static_cast<float>(
                                        scale_r * (static_cast<double>(d) * dh - sum_dh - xhat[r * d + j] * sum_dh_h));
                                }
                            }
                        }
                    });
    }
    return result;
}

CrossEntropy cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets,
                           std::int32_t ignore_index) {
    require_rank2(logits, "cross_entropy");
    const std::size_t b = logits.dim(0), v = logits.dim(1);
    if (targets.size() != b) {
        fail(ErrorKind::dimension,
             fmt::format("cross_entropy: {} targets for logits {}", targets.size(), shape_string(logits.shape())));
    }
    const auto lv = logits.values();
    std::vector<float> probs(b * v, 0.0f);
    std::size_t counted = 0;
    double total = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        const std::int32_t t = targets[r];
        if (t == ignore_index) {
            continue;
        }
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            fail(ErrorKind::validation, fmt::format("cross_entropy target {} outside [0, {})", t, v));
        }
        const float* row = lv.data() + r * v;
        float peak = row[0];
        for (std::size_t j = 1; j < v; ++j) {
            peak = std::max(peak, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            const double e = std::exp(static_cast<double>(row[j]) - peak);
            probs[r * v + j] = static_cast<float>(e);
            z += e;
        }
        for (std::size_t j = 0; j < v; ++j) {
            probs[r * v + j] = static_cast<float>(probs[r * v + j] / z);
        }
        total += (static_cast<double>(peak) + std::log(z)) - row[t];
        ++counted;
    }
    const float loss_value = counted == 0 ? 0.0f : static_cast<float>(total / static_cast<double>(counted));
    const bool rec = tape.wants({&logits});
    Tensor loss = make_result({1}, {loss_value}, rec);
    if (rec) {
        std::vector<std::int32_t> tgt(targets.begin(), targets.end());
        tape.record("cross_entropy", {logits.id()}, loss,
                    [ln = logits.node(), on = loss.node(), probs = std::move(probs), tgt = std::move(tgt), ignore_index,
                     counted, b, v] {
                        if (counted == 0) {
                            return;
                        }
                        auto& g = grad_of(ln);
                        const float upstream = on->grad[0] / static_cast<float>(counted);
                        for (std::size_t r = 0; r < b; ++r) {
                            if (tgt[r] == ignore_index) {
                                continue;
                            }
                            for (std::size_t j = 0; j < v; ++j) {
                                g[r * v + j] += upstream * probs[r * v + j];
                            }
                            g[r * v + static_cast<std::size_t>(tgt[r])] -= upstream;
                        }
                    });
    }
    return CrossEntropy{loss, counted, counted == 0};
}

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (float v : x.values()) {
        total += v;
    }
    const bool rec = tape.wants({&x});
    Tensor result = make_result({1}, {static_cast<float>(total)}, rec);
    if (rec) {
        tape.record("sum", {x.id()}, result, [xn = x.node(), on = result.node()] {
            auto& g = grad_of(xn);
            const float up = on->grad[0];
            for (auto& gi : g) {
                gi += up;
            }
        });
    }
    return result;
}

Tensor mean(Tape& tape, const Tensor& x) {
    return scale(tape, sum(tape, x), 1.0f / static_cast<float>(x.size()));
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
    require_rank2(table, "embedding");
    if (ids.empty()) {
        fail(ErrorKind::dimension, "embedding lookup with no ids");
    }
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    const auto tv = table.values();
    std::vector<float> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            fail(ErrorKind::validation, fmt::format("embedding id {} outside [0, {})", ids[i], vocab));
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    const bool rec = tape.wants({&table});
    Tensor result = make_result({ids.size(), d}, std::move(out), rec);
    if (rec) {
        std::vector<std::int32_t> idv(ids.begin(), ids.end());
        tape.record("embedding", {table.id()}, result, [tn = table.node(), on = result.node(), idv = std::move(idv), d] {
            auto& g = grad_of(tn);
            for (std::size_t i = 0; i < idv.size(); ++i) {
                float* dst = g.data() + static_cast<std::size_t>(idv[i]) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += on->grad[i * d + j];
                }
            }
        });
    }
    return result;
}

Tensor concat_rows(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) {
        fail(ErrorKind::dimension, "concat_rows with no parts");
    }
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            fail(ErrorKind::dimension, fmt::format("concat_rows width mismatch: {} vs {}",
                                                   shape_string(parts.front().shape()), shape_string(p.shape())));
        }
        rows += p.rows();
    }
    std::vector<float> out;
    out.reserve(rows * cols);
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    const bool rec = tape.wants(parts);
    Tensor result = make_result({rows, cols}, std::move(out), rec);
    if (rec) {
        std::vector<NodePtr> nodes;
        std::vector<std::uint64_t> ids;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            ids.push_back(p.id());
        }
        tape.record("concat_rows", std::move(ids), result, [nodes = std::move(nodes), on = result.node()] {
            std::size_t offset = 0;
            for (const auto& n : nodes) {
                const std::size_t count = n->value.size();
                if (n->requires_grad) {
                    auto& g = grad_of(n);
                    for (std::size_t i = 0; i < count; ++i) {
                        g[i] += on->grad[offset + i];
                    }
                }
                offset += count;
            }
        });
    }
    return result;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) {
        fail(ErrorKind::dimension, "concat_cols with no parts");
    }
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != rows) {
            fail(ErrorKind::dimension, fmt::format("concat_cols height mismatch: {} vs {}",
                                                   shape_string(parts.front().shape()), shape_string(p.shape())));
        }
        widths.push_back(p.cols());
        cols += p.cols();
    }
    std::vector<float> out(rows * cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        const auto pv = p.values();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(pv.data() + r * w, w, out.data() + r * cols + offset);
        }
        offset += w;
    }
    const bool rec = tape.wants(parts);
    Tensor result = make_result({rows, cols}, std::move(out), rec);
    if (rec) {
        std::vector<NodePtr> nodes;
        std::vector<std::uint64_t> ids;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            ids.push_back(p.id());
        }
        tape.record("concat_cols", std::move(ids), result, [nodes = std::move(nodes), on = result.node(), rows, cols] {
            std::size_t col0 = 0;
            for (const auto& n : nodes) {
                const std::size_t w = n->value.size() / rows;
                if (n->requires_grad) {
                    auto& g = grad_of(n);
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < w; ++j) {
                            g[r * w + j] += on->grad[r * cols + col0 + j];
                        }
                    }
                }
                col0 += w;
            }
        });
    }
    return result;
}

Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
    if (count == 0 || begin + count > x.rows()) {
        fail(ErrorKind::dimension,
             fmt::format("slice_rows [{}, {}) out of range for {}", begin, begin + count, shape_string(x.shape())));
    }
    const std::size_t cols = x.cols();
    std::vector<float> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                           x.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
    const bool rec = tape.wants({&x});
    Tensor result = make_result({count, cols}, std::move(out), rec);
    if (rec) {
        tape.record("slice_rows", {x.id()}, result, [xn = x.node(), on = result.node(), begin, cols] {
            auto& g = grad_of(xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                g[begin * cols + i] += on->grad[i];
            }
        });
    }
    return result;
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
    require_rank2(x, "slice_cols");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (count == 0 || begin + count > cols) {
        fail(ErrorKind::dimension,
             fmt::format("slice_cols [{}, {}) out of range for {}", begin, begin + count, shape_string(x.shape())));
    }
    const auto xv = x.values();
    std::vector<float> out(rows * count);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(xv.data() + r * cols + begin, count, out.data() + r * count);
    }
    const bool rec = tape.wants({&x});
    Tensor result = make_result({rows, count}, std::move(out), rec);
    if (rec) {
        tape.record("slice_cols", {x.id()}, result, [xn = x.node(), on = result.node(), rows, cols, begin, count] {
            auto& g = grad_of(xn);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < count; ++j) {
                    g[r * cols + begin + j] += on->grad[r * count + j];
                }
            }
        });
    }
    return result;
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows) {
    if (rows.empty()) {
        fail(ErrorKind::dimension, "gather_rows with no indices");
    }
    const std::size_t cols = x.cols();
    const auto xv = x.values();
    std::vector<float> out(rows.size() * cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.rows()) {
            fail(ErrorKind::dimension,
                 fmt::format("gather_rows index {} out of range for {}", rows[i], shape_string(x.shape())));
        }
        std::copy_n(xv.data() + rows[i] * cols, cols, out.data() + i * cols);
    }
    const bool rec = tape.wants({&x});
    Tensor result = make_result({rows.size(), cols}, std::move(out), rec);
    if (rec) {
        std::vector<std::size_t> idx(rows.begin(), rows.end());
        tape.record("gather_rows", {x.id()}, result, [xn = x.node(), on = result.node(), idx = std::move(idx), cols] {
            auto& g = grad_of(xn);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    g[idx[i] * cols + j] += on->grad[i * cols + j];
                }
            }
        });
    }
    return result;
}

Tensor causal_mask(Tape& tape, const Tensor& scores) {
    require_rank2(scores, "causal_mask");
    const std::size_t n = scores.dim(0);
    if (scores.dim(1) != n) {
        fail(ErrorKind::dimension, "causal_mask expects a square matrix, got " + shape_string(scores.shape()));
    }
    std::vector<float> out(scores.values().begin(), scores.values().end());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            out[i * n + j] = -std::numeric_limits<float>::infinity();
        }
    }
    const bool rec = tape.wants({&scores});
    Tensor result = make_result({n, n}, std::move(out), rec);
    if (rec) {
        tape.record("causal_mask", {scores.id()}, result, [sn = scores.node(), on = result.node(), n] {
            auto& g = grad_of(sn);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j <= i; ++j) {
                    g[i * n + j] += on->grad[i * n + j];
                }
            }
        });
    }
    return result;
}

Tensor mean_rows(Tape& tape, const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    const auto xv = x.values();
    std::vector<float> out(n, 0.0f);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += xv[i * n + j];
        }
    }
    const float count = static_cast<float>(m);
    for (auto& v : out) {
        v /= count;
    }
    const bool rec = tape.wants({&x});
    Tensor result = make_result({1, n}, std::move(out), rec);
    if (rec) {
        tape.record("mean_rows", {x.id()}, result, [xn = x.node(), on = result.node(), m, n, count] {
            auto& g = grad_of(xn);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    g[i * n + j] += on->grad[j] / count;
                }
            }
        });
    }
    return result;
}

Tensor sq_dist(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank2(a, "sq_dist");
    require_rank2(b, "sq_dist");
    const std::size_t q = a.dim(0), p = b.dim(0), d = a.dim(1);
    if (b.dim(1) != d) {
        fail(ErrorKind::dimension,
             fmt::format("sq_dist width mismatch: {} vs {}", shape_string(a.shape()), shape_string(b.shape())));
    }
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<float> out(q * p);
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
            float acc = 0.0f;
            for (std::size_t k = 0; k < d; ++k) {
                const float diff = av[i * d + k] - bv[j * d + k];
                acc += diff * diff;
            }
            out[i * p + j] = acc;
        }
    }
    const bool rec = tape.wants({&a, &b});
    Tensor result = make_result({q, p}, std::move(out), rec);
    if (rec) {
        tape.record("sq_dist", {a.id(), b.id()}, result, [an = a.node(), bn = b.node(), on = result.node(), q, p, d] {
            std::vector<float>* ga = an->requires_grad ? &grad_of(an) : nullptr;
            std::vector<float>* gb = bn->requires_grad ? &grad_of(bn) : nullptr;
            for (std::size_t i = 0; i < q; ++i) {
                for (std::size_t j = 0; j < p; ++j) {
                    const float g = on->grad[i * p + j];
                    for (std::size_t k = 0; k < d; ++k) {
                        const float diff = 2.0f * g * (an->value[i * d + k] - bn->value[j * d + k]);
                        if (ga) {
                            (*ga)[i * d + k] += diff;
                        }
                        if (gb) {
                            (*gb)[j * d + k] -= diff;
                        }
                    }
                }
            }
        });
    }
    return result;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (element_count(shape) != x.size()) {
        fail(ErrorKind::dimension,
             fmt::format("cannot reshape {} to {}", shape_string(x.shape()), shape_string(shape)));
    }
    const bool rec = tape.wants({&x});
    Tensor result = make_result(std::move(shape), std::vector<float>(x.values().begin(), x.values().end()), rec);
    if (rec) {
        tape.record("reshape", {x.id()}, result, [xn = x.node(), on = result.node()] {
            auto& g = grad_of(xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += on->grad[i];
            }
        });
    }
    return result;
}

}  // namespace m3f::ad
