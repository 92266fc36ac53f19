#include "data/prompt.hpp"

#include <array>

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::data {

std::string_view to_string(TaskKind kind) {
    return kind == TaskKind::classification ? "classification" : "generation";
}

namespace {

const std::array<PromptTemplate, 6> kClassification{{
    {"cls-0", "Classify {MEDIA} as one of {OPTIONS}. Answer: ", TaskKind::classification},
    {"cls-1", "{MEDIA} Options: {OPTIONS}. Label: ", TaskKind::classification},
    {"cls-2", "Which of {OPTIONS} is {MEDIA}? ", TaskKind::classification},
    {"cls-3", "Sample {MEDIA}; choose from {OPTIONS}: ", TaskKind::classification},
    {"cls-4", "Pick the class of {MEDIA} among {OPTIONS}. ", TaskKind::classification},
    {"cls-5", "Options {OPTIONS}. Input {MEDIA}. Class: ", TaskKind::classification},
}};

const std::array<PromptTemplate, 3> kGeneration{{
    {"gen-0", "Describe {MEDIA}: ", TaskKind::generation},
    {"gen-1", "{MEDIA} Description: ", TaskKind::generation},
    {"gen-2", "What does {MEDIA} show? ", TaskKind::generation},
}};

bool contains(std::string_view pattern, std::string_view placeholder) {
    return pattern.find(placeholder) != std::string_view::npos;
}

}  // namespace

void validate_template(const PromptTemplate& t) {
    if (!contains(t.pattern, "{MEDIA}")) {
        fail(ErrorKind::template_error, fmt::format("template {}: pattern lacks {{MEDIA}}", t.id));
    }
    if (t.kind == TaskKind::classification && !contains(t.pattern, "{OPTIONS}")) {
        fail(ErrorKind::template_error, fmt::format("template {}: classification pattern lacks {{OPTIONS}}", t.id));
    }
}

RenderedPrompt render_prompt(const PromptTemplate& t, const Sample& s, std::span<const std::string> options) {
    validate_template(t);
    RenderedPrompt out;
    std::size_t tokens = 0;
    auto emit = [&](std::string_view text) {
        out.text += text;
        tokens += text.size();
    };
    const std::string_view p = t.pattern;
    std::size_t i = 0;
    while (i < p.size()) {
        if (p[i] != '{') {
            const auto next = p.find('{', i);
            const auto stop = next == std::string_view::npos ? p.size() : next;
            emit(p.substr(i, stop - i));
            i = stop;
            continue;
        }
        const auto close = p.find('}', i);
        if (close == std::string_view::npos) {
            fail(ErrorKind::template_error, fmt::format("template {}: unterminated placeholder at offset {}", t.id, i));
        }
        const auto name = p.substr(i + 1, close - i - 1);
        if (name == "MEDIA") {
            out.text += kMediaMarker;
            out.media_slots.push_back(tokens);
            ++tokens;
        } else if (name == "LABEL") {
            emit(s.class_label);
        } else if (name == "OPTIONS") {
            if (options.empty()) {
                fail(ErrorKind::template_error, fmt::format("template {}: {{OPTIONS}} with no options", t.id));
            }
            for (std::size_t k = 0; k < options.size(); ++k) {
                if (k > 0) {
                    emit(", ");
                }
                emit(options[k]);
            }
        } else if (name == "DESCRIPTION") {
            if (!s.description) {
                fail(ErrorKind::template_error,
                     fmt::format("template {}: sample {} has no description for {{DESCRIPTION}}", t.id, s.id));
            }
            emit(*s.description);
        } else {
            fail(ErrorKind::template_error, fmt::format("template {}: unresolved placeholder {{{}}}", t.id, name));
        }
        i = close + 1;
    }
    return out;
}

std::span<const PromptTemplate> template_bank(TaskKind kind) {
    if (kind == TaskKind::classification) {
        return kClassification;
    }
    return kGeneration;
}

}  // namespace m3f::data
