#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace m3f::eval {

/// TP / (TP + (FP + FN) / 2) pooled over one-vs-rest counts of every class.
/// Validation error for empty or mismatched inputs and out-of-range indices.
double micro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t n_classes);
double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> golds);

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

// Precision/recall of a class with no predictions/golds is reported as 0.
std::vector<ClassScores> per_class_scores(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                                          std::size_t n_classes);

}  // namespace m3f::eval
