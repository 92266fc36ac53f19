#include "data/episode.hpp"

#include <algorithm>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace m3f::data {

Episode sample_episode(const Dataset& ds, const EpisodeParams& params, std::uint64_t seed,
                       std::span<const std::string> class_pool) {
    if (params.n_way == 0 || params.k_shot == 0 || params.q_query == 0) {
        fail(ErrorKind::episode, fmt::format("n_way, k_shot and q_query must be positive (got {}, {}, {})",
                                             params.n_way, params.k_shot, params.q_query));
    }
    std::vector<std::string> pool;
    if (class_pool.empty()) {
        pool.assign(ds.classes().begin(), ds.classes().end());
    } else {
        for (const auto& label : class_pool) {
            if (!ds.has_class(label)) {
                fail(ErrorKind::episode, fmt::format("class \"{}\" is not in the dataset", label));
            }
            pool.push_back(label);
        }
    }
    const std::size_t need = params.k_shot + params.q_query;
    std::vector<std::string> eligible, deficient;
    for (const auto& label : pool) {
        (ds.members(label).size() >= need ? eligible : deficient).push_back(label);
    }
    if (eligible.size() < params.n_way) {
        if (pool.size() < params.n_way) {
            fail(ErrorKind::episode,
                 fmt::format("{}-way episode needs {} classes, only {} available", params.n_way, params.n_way,
                             pool.size()));
        }
        std::vector<std::string> described;
        for (const auto& label : deficient) {
            described.push_back(fmt::format("\"{}\" ({} samples)", label, ds.members(label).size()));
        }
        fail(ErrorKind::episode, fmt::format("{}-way {}-shot {}-query episode needs {} samples per class; "
                                             "only {} classes qualify; deficient: {}",
                                             params.n_way, params.k_shot, params.q_query, need, eligible.size(),
                                             fmt::join(described, ", ")));
    }

    Rng rng(seed);
    Episode ep;
    ep.params = params;
    ep.seed = seed;
    for (auto pick : rng.choose(eligible.size(), params.n_way)) {
        ep.labels.push_back(eligible[pick]);
    }
    for (std::size_t c = 0; c < ep.labels.size(); ++c) {
        const auto members = ds.members(ep.labels[c]);
        const auto picks = rng.choose(members.size(), need);
        for (std::size_t i = 0; i < need; ++i) {
            auto& dst = i < params.k_shot ? ep.support : ep.query;
            dst.push_back({members[picks[i]], c});
        }
    }
    return ep;
}

namespace {

std::vector<std::string> ids_of(const Dataset& ds, const std::vector<EpisodeItem>& items) {
    std::vector<std::string> out;
    out.reserve(items.size());
    for (const auto& it : items) {
        out.push_back(ds.sample(it.sample).id);
    }
    return out;
}

json items_json(const Dataset& ds, const std::vector<EpisodeItem>& items) {
    json out = json::array();
    for (const auto& it : items) {
        out.push_back({{"id", ds.sample(it.sample).id}, {"class_index", it.class_index}});
    }
    return out;
}

}  // namespace

std::vector<std::string> support_ids(const Dataset& ds, const Episode& ep) { return ids_of(ds, ep.support); }
std::vector<std::string> query_ids(const Dataset& ds, const Episode& ep) { return ids_of(ds, ep.query); }

json episode_to_json(const Dataset& ds, const Episode& ep) {
    return json{{"seed", ep.seed},
                {"n_way", ep.params.n_way},
                {"k_shot", ep.params.k_shot},
                {"q_query", ep.params.q_query},
                {"labels", ep.labels},
                {"support", items_json(ds, ep.support)},
                {"query", items_json(ds, ep.query)}};
}

}  // namespace m3f::data
