#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "autodiff/tensor.hpp"

// Differentiable operations. Each op evaluates eagerly and, when the tape is
// recording and some input requires a gradient, registers its backward rule.
// Unless stated otherwise ops take rank-2 tensors ([rows x cols]).
namespace m3f::ad {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// x * W^T + bias, with W laid out [out x in]. `bias` may be undefined.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor transpose(Tape& tape, const Tensor& a);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, float factor);

/// a[m x n] + row[n] broadcast over rows (row may be [n] or [1 x n]).
Tensor add_row(Tape& tape, const Tensor& a, const Tensor& row);

/// Rows where `replace[r]` is set take `row` ([1 x n]); others keep a's row.
Tensor replace_rows(Tape& tape, const Tensor& a, const Tensor& row, std::span<const std::uint8_t> replace);

/// GELU, tanh approximation.
Tensor gelu(Tape& tape, const Tensor& x);

/// Numerically stable softmax along `axis` of a tensor of any rank.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies gain and bias ([d] each).
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);

struct CrossEntropy {
    Tensor loss;               // scalar
    std::size_t counted = 0;   // positions not equal to ignore_index
    bool all_ignored = false;  // loss defined as zero in that case
};

/// Mean negative log-likelihood over rows whose target != ignore_index.
CrossEntropy cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets,
                           std::int32_t ignore_index = -100);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Row lookup: out[i] = table[ids[i]].
Tensor embedding(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids);

Tensor concat_rows(Tape& tape, std::span<const Tensor> parts);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows);

/// Square [L x L] scores with entries above the diagonal set to -inf.
Tensor causal_mask(Tape& tape, const Tensor& scores);

/// Column means: [m x n] -> [1 x n], summed top to bottom.
Tensor mean_rows(Tape& tape, const Tensor& x);

/// Pairwise squared Euclidean distances: [q x d], [p x d] -> [q x p].
Tensor sq_dist(Tape& tape, const Tensor& a, const Tensor& b);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

}  // namespace m3f::ad
