#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

#include "common/json_util.hpp"

namespace m3f::train {

/// Append-only line-delimited log. Records are kept in memory as well; a
/// record whose "loss" field is non-finite is a training error.
class TrainLog {
public:
    TrainLog() = default;
    explicit TrainLog(const std::filesystem::path& path);

    void write(ordered_json record);
    const std::vector<ordered_json>& records() const { return records_; }

private:
    std::optional<std::ofstream> out_;
    std::vector<ordered_json> records_;
};

}  // namespace m3f::train
