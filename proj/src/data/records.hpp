#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "data/sample.hpp"

namespace m3f::data {

// On-disk layout: <dir>/records.jsonl, one JSON object per sample, plus
// <dir>/payloads/<n>.m3ft binary tensors referenced by "payload_path".
inline constexpr const char* kRecordsFile = "records.jsonl";

void write_records(const Dataset& ds, const std::filesystem::path& dir);

struct LoadedRecords {
    Dataset dataset;
    // Class-size warnings; ingestion accepts classes outside the 1..10 band.
    std::vector<std::string> warnings;
};

/// `path` is a records file or a directory containing records.jsonl. Tables
/// may be given inline as {"table": {"columns": [...], "rows": [[...], ...]}}.
LoadedRecords read_records(const std::filesystem::path& path);

}  // namespace m3f::data
