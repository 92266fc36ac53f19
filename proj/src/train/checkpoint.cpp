#include "train/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "autodiff/tensor_io.hpp"
#include "common/error.hpp"
#include "common/json_util.hpp"

namespace m3f::train {

namespace fs = std::filesystem;

bool Lineage::has(int stage) const { return std::find(stages.begin(), stages.end(), stage) != stages.end(); }

adapters::AdapterSet* TrainState::adapter_set(const std::string& tag) {
    for (auto& s : adapter_sets) {
        if (s.tag == tag) {
            return &s;
        }
    }
    return nullptr;
}

TrainState fresh_state(const model::ModelConfig& cfg, std::uint64_t seed) {
    return TrainState{model::init_model(cfg, seed), {}, {}};
}

TrainState clone_state(const TrainState& state) {
    TrainState out{{state.model.config, {}}, state.adapter_sets, state.lineage};
    for (const auto& name : state.model.params.names()) {
        const auto& t = state.model.params.get(name);
        out.model.params.add(name, t.clone(t.requires_grad()));
    }
    for (const auto& [target, slot] : state.model.params.adapters()) {
        out.model.params.set_adapter(slot);
    }
    return out;
}

namespace {

constexpr const char* kFormat = "m3f-checkpoint";

std::string segment_of(const std::string& name) {
    const auto first = name.find('.');
    const std::string head = name.substr(0, first);
    if (head == "encoder" || head == "adapter") {
        const auto second = name.find('.', first + 1);
        return name.substr(0, second);
    }
    return head;
}

}  // namespace

void save_checkpoint(const TrainState& state, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        fail(ErrorKind::io, fmt::format("cannot create {}: {}", dir.string(), ec.message()));
    }
    const auto& store = state.model.params;
    std::map<std::string, std::vector<std::string>> segments;
    ordered_json params = ordered_json::array();
    for (const auto& name : store.names()) {
        const auto& t = store.get(name);
        const std::string seg = segment_of(name);
        params.push_back({{"name", name},
                          {"shape", t.shape()},
                          {"trainable", t.requires_grad()},
                          {"segment", seg + ".m3ft"},
                          {"index", segments[seg].size()}});
        segments[seg].push_back(name);
    }
    for (const auto& [seg, names] : segments) {
        const auto path = dir / (seg + ".m3ft");
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(ErrorKind::io, "cannot write " + path.string());
        }
        for (const auto& n : names) {
            ad::write_tensor(out, store.get(n));
        }
    }
    ordered_json sets = ordered_json::array();
    for (const auto& s : state.adapter_sets) {
        sets.push_back({{"tag", s.tag}, {"rank", s.rank}, {"alpha", s.alpha}, {"targets", s.targets},
                        {"merged", s.merged}});
    }
    ordered_json manifest{{"format", kFormat},
                          {"version", 1},
                          {"model", model::to_json(state.model.config)},
                          {"lineage",
                           {{"stages", state.lineage.stages}, {"pretrain_classes", state.lineage.pretrain_classes}}},
                          {"adapter_sets", sets},
                          {"params", params}};
    std::ofstream(dir / "manifest.json") << manifest.dump(1) << '\n';
}

TrainState load_checkpoint(const fs::path& dir) {
    const auto manifest_path = (dir / "manifest.json").string();
    const json manifest = parse_json_file(manifest_path);
    TrainState state;
    try {
        if (manifest.at("format") != kFormat) {
            fail(ErrorKind::parse, manifest_path + ": not an m3f checkpoint manifest");
        }
        state.model.config = model::model_config_from_json(manifest.at("model"));
        const auto& lin = manifest.at("lineage");
        state.lineage.stages = lin.at("stages").get<std::vector<int>>();
        state.lineage.pretrain_classes = lin.at("pretrain_classes").get<std::vector<std::string>>();

        std::map<std::string, std::vector<ad::RawTensor>> loaded;
        for (const auto& p : manifest.at("params")) {
            const auto name = p.at("name").get<std::string>();
            const auto seg = p.at("segment").get<std::string>();
            if (!loaded.contains(seg)) {
                loaded[seg] = ad::read_tensor_segment(dir / seg);
            }
            const auto index = p.at("index").get<std::size_t>();
            auto& records = loaded[seg];
            if (index >= records.size()) {
                fail(ErrorKind::parse, fmt::format("{}: {} has no tensor {} in {}", manifest_path, name, index, seg));
            }
            const auto shape = p.at("shape").get<ad::Shape>();
            if (records[index].shape != shape) {
                fail(ErrorKind::parse, fmt::format("{}: {} is {} in the manifest but {} in {}", manifest_path, name,
                                                   ad::shape_string(shape), ad::shape_string(records[index].shape), seg));
            }
            state.model.params.add(name, ad::Tensor::from(shape, std::move(records[index].values),
                                                          p.at("trainable").get<bool>()));
        }
        for (const auto& s : manifest.at("adapter_sets")) {
            adapters::AdapterSet set;
            set.tag = s.at("tag").get<std::string>();
            set.rank = s.at("rank").get<std::size_t>();
            set.alpha = s.at("alpha").get<float>();
            set.targets = s.at("targets").get<std::vector<std::string>>();
            set.merged = s.at("merged").get<bool>();
            if (!set.merged) {
                for (const auto& t : set.targets) {
                    const auto a = adapters::factor_name(set.tag, t, 'A');
                    const auto b = adapters::factor_name(set.tag, t, 'B');
                    if (!state.model.params.contains(a) || !state.model.params.contains(b)) {
                        fail(ErrorKind::parse, fmt::format("{}: adapter factors for {} are missing", manifest_path, t));
                    }
                    state.model.params.set_adapter({t, set.rank, set.alpha, a, b});
                }
            }
            state.adapter_sets.push_back(std::move(set));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::parse, fmt::format("{}: {}", manifest_path, e.what()));
    }
    return state;
}

}  // namespace m3f::train
