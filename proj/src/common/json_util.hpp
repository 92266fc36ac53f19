#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

namespace m3f {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// Config objects are strict: any key outside `allowed` is a configuration error.
void reject_unknown_keys(const json& obj, std::initializer_list<std::string_view> allowed, std::string_view context);

json parse_json_file(const std::string& path);

// j[key] as a non-negative integer, or `fallback` when absent; configuration error otherwise.
std::size_t get_size(const json& j, const char* key, std::size_t fallback);

// Lower-case hex FNV-1a of the canonical (sorted-key) dump.
std::string content_hash(const json& value);

}  // namespace m3f
