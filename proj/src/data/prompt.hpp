#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "data/sample.hpp"

namespace m3f::data {

enum class TaskKind { classification, generation };

std::string_view to_string(TaskKind kind);

// UTF-8 marker that stands in for {MEDIA} in rendered text.
inline constexpr std::string_view kMediaMarker = "\xE2\x9F\xA8media\xE2\x9F\xA9";

struct PromptTemplate {
    std::string id;
    std::string pattern;
    TaskKind kind = TaskKind::classification;
};

/// Checks the placeholder requirements for the template's task kind; throws a
/// template error.
void validate_template(const PromptTemplate& t);

struct RenderedPrompt {
    std::string text;  // with kMediaMarker in place of each {MEDIA}
    // Positions of the media markers when the text is read as byte tokens with
    // every marker collapsed to a single token.
    std::vector<std::size_t> media_slots;
};

RenderedPrompt render_prompt(const PromptTemplate& t, const Sample& s, std::span<const std::string> options);

// Built-in bank; ids are "cls-N" / "gen-N".
std::span<const PromptTemplate> template_bank(TaskKind kind);

}  // namespace m3f::data
