#include "eval/metrics.hpp"

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::eval {

namespace {

void check_inputs(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t n_classes) {
    if (preds.empty()) {
        fail(ErrorKind::validation, "micro-F1 is undefined for an empty prediction set");
    }
    if (preds.size() != golds.size()) {
        fail(ErrorKind::validation, fmt::format("{} predictions for {} gold labels", preds.size(), golds.size()));
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] >= n_classes || golds[i] >= n_classes) {
            fail(ErrorKind::validation,
                 fmt::format("item {}: class index out of range for {} classes", i, n_classes));
        }
    }
}

struct Counts {
    std::vector<std::size_t> tp, fp, fn;
};

Counts count(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t n_classes) {
    Counts c{std::vector<std::size_t>(n_classes), std::vector<std::size_t>(n_classes),
             std::vector<std::size_t>(n_classes)};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == golds[i]) {
            ++c.tp[golds[i]];
        } else {
            ++c.fp[preds[i]];
            ++c.fn[golds[i]];
        }
    }
    return c;
}

}  // namespace

double micro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t n_classes) {
    check_inputs(preds, golds, n_classes);
    const Counts c = count(preds, golds, n_classes);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t k = 0; k < n_classes; ++k) {
        tp += c.tp[k];
        fp += c.fp[k];
        fn += c.fn[k];
    }
    return static_cast<double>(tp) / (static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn));
}

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> golds) {
    if (preds.empty() || preds.size() != golds.size()) {
        fail(ErrorKind::validation, "accuracy needs equal-length, non-empty inputs");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        hit += preds[i] == golds[i];
    }
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

std::vector<ClassScores> per_class_scores(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                                          std::size_t n_classes) {
    check_inputs(preds, golds, n_classes);
    const Counts c = count(preds, golds, n_classes);
    std::vector<ClassScores> out(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k) {
        auto& s = out[k];
        const auto tp = static_cast<double>(c.tp[k]);
        s.support = c.tp[k] + c.fn[k];
        s.precision = c.tp[k] + c.fp[k] > 0 ? tp / static_cast<double>(c.tp[k] + c.fp[k]) : 0.0;
        s.recall = s.support > 0 ? tp / static_cast<double>(s.support) : 0.0;
        s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    }
    return out;
}

}  // namespace m3f::eval
