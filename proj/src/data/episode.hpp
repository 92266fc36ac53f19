#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "common/json_util.hpp"
#include "data/sample.hpp"

namespace m3f::data {

struct EpisodeParams {
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
    std::size_t q_query = 1;
    bool operator==(const EpisodeParams&) const = default;
};

struct EpisodeItem {
    std::size_t sample = 0;       // index into the dataset
    std::size_t class_index = 0;  // 0..n_way-1
    bool operator==(const EpisodeItem&) const = default;
};

struct Episode {
    EpisodeParams params;
    std::uint64_t seed = 0;
    std::vector<std::string> labels;  // labels[class_index]
    std::vector<EpisodeItem> support;
    std::vector<EpisodeItem> query;

    bool operator==(const Episode& o) const {
        return seed == o.seed && labels == o.labels && support == o.support && query == o.query;
    }
};

/// Draws n_way classes uniformly (from `class_pool` when given, otherwise all
/// dataset classes), then splits k_shot + q_query samples per class without
/// replacement. Pure function of its arguments.
Episode sample_episode(const Dataset& ds, const EpisodeParams& params, std::uint64_t seed,
                       std::span<const std::string> class_pool = {});

// Sample ids of every support/query item, in order.
std::vector<std::string> support_ids(const Dataset& ds, const Episode& ep);
std::vector<std::string> query_ids(const Dataset& ds, const Episode& ep);

json episode_to_json(const Dataset& ds, const Episode& ep);

}  // namespace m3f::data
