#include "adapters/adapters.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "autodiff/kernels.hpp"
#include "autodiff/tensor_io.hpp"
#include "common/error.hpp"
#include "common/json_util.hpp"

namespace m3f::adapters {

namespace fs = std::filesystem;
using model::Tensor;

namespace {

bool starts_with(const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; }

std::string a_name(const std::string& tag, const std::string& target) { return factor_name(tag, target, 'A'); }
std::string b_name(const std::string& tag, const std::string& target) { return factor_name(tag, target, 'B'); }

}  // namespace

std::string factor_name(const std::string& tag, const std::string& target, char which) {
    return fmt::format("adapter.{}.{}.{}", tag, target, which);
}

std::size_t AdapterSet::parameter_count(const ParamStore& store) const {
    std::size_t n = 0;
    if (merged) {
        return 0;
    }
    for (const auto& t : targets) {
        n += store.get(a_name(tag, t)).size() + store.get(b_name(tag, t)).size();
    }
    return n;
}

std::vector<std::string> default_targets(const decoder::DecoderConfig& cfg) {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        out.push_back(decoder::attention_weight(l, "q"));
        out.push_back(decoder::attention_weight(l, "v"));
    }
    out.push_back("projector.fc1.weight");
    out.push_back("projector.fc2.weight");
    return out;
}

AdapterSet attach(ParamStore& store, const std::vector<std::string>& targets, std::size_t rank, float alpha,
                  Rng& rng, const std::string& tag) {
    if (rank == 0) {
        fail(ErrorKind::validation, "adapter rank must be at least 1");
    }
    for (const auto& t : targets) {
        const Tensor* w = store.find(t);
        if (w == nullptr) {
            fail(ErrorKind::configuration, "adapter target " + t + " is not a parameter");
        }
        if (w->rank() != 2) {
            fail(ErrorKind::configuration,
                 fmt::format("adapter target {} has shape {}; a 2D weight is required", t, ad::shape_string(w->shape())));
        }
        if (store.adapter_for(t) != nullptr) {
            fail(ErrorKind::usage, "adapter target " + t + " already carries an adapter");
        }
    }
    AdapterSet set;
    set.tag = tag;
    set.targets = targets;
    set.rank = rank;
    set.alpha = alpha > 0.0f ? alpha : 2.0f * static_cast<float>(rank);
    for (const auto& t : targets) {
        const Tensor& w = store.get(t);
        const std::size_t out = w.dim(0), in = w.dim(1);
        const float bound = 1.0f / std::sqrt(static_cast<float>(in));
        std::vector<float> a(rank * in);
        for (auto& x : a) {
            x = rng.uniform(-bound, bound);
        }
        store.add(a_name(tag, t), Tensor::from({rank, in}, std::move(a), true));
        store.add(b_name(tag, t), Tensor::zeros({out, rank}, true));
        store.set_adapter({t, rank, set.alpha, a_name(tag, t), b_name(tag, t)});
    }
    return set;
}

void merge(ParamStore& store, AdapterSet& set) {
    if (set.merged) {
        fail(ErrorKind::usage, fmt::format("adapter set \"{}\" was already merged", set.tag));
    }
    const float s = set.alpha / static_cast<float>(set.rank);
    for (const auto& t : set.targets) {
        Tensor& w = store.get(t);
        const Tensor& a = store.get(a_name(set.tag, t));
        const Tensor& b = store.get(b_name(set.tag, t));
        const std::size_t out = w.dim(0), in = w.dim(1);
        std::vector<float> delta(out * in);
        ad::kernels::gemm_nn(out, set.rank, in, b.values().data(), a.values().data(), delta.data(), false);
        auto wv = w.mutable_values();
        for (std::size_t i = 0; i < wv.size(); ++i) {
            wv[i] += s * delta[i];
        }
    }
    detach(store, set);
    set.merged = true;
}

void detach(ParamStore& store, AdapterSet& set) {
    if (set.merged) {
        return;
    }
    for (const auto& t : set.targets) {
        store.remove(a_name(set.tag, t));
        store.remove(b_name(set.tag, t));
        store.drop_adapter(t);
    }
}

bool FreezePolicy::trainable(const std::string& name) const {
    const bool adapter = starts_with(name, "adapter.");
    switch (stage) {
    case Stage::knowledge: return true;
    case Stage::curriculum:
        return adapter || starts_with(name, "encoder.") || starts_with(name, "special.") ||
               starts_with(name, "projector.");
    case Stage::generation: return adapter || starts_with(name, "projector.");
    case Stage::task: {
        if (adapter) {
            return true;
        }
        if (!target_modality) {
            return false;
        }
        return starts_with(name, fmt::format("encoder.{}.", data::to_string(*target_modality)));
    }
    }
    return false;
}

std::vector<std::string> trainable_params(const ParamStore& store, const FreezePolicy& policy) {
    std::vector<std::string> out;
    for (const auto& name : store.names()) {
        if (policy.trainable(name)) {
            out.push_back(name);
        }
    }
    return out;
}

std::size_t apply_policy(ParamStore& store, const FreezePolicy& policy) {
    std::size_t count = 0;
    for (const auto& name : store.names()) {
        Tensor& t = store.get(name);
        const bool on = policy.trainable(name);
        t.set_requires_grad(on);
        t.zero_grad();
        count += on ? t.size() : 0;
    }
    return count;
}

void save_adapters(const ParamStore& store, const AdapterSet& set, const fs::path& dir) {
    if (set.merged) {
        fail(ErrorKind::usage, "cannot save a merged adapter set");
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        fail(ErrorKind::io, fmt::format("cannot create {}: {}", dir.string(), ec.message()));
    }
    std::ofstream seg(dir / "adapters.m3ft", std::ios::binary | std::ios::trunc);
    if (!seg) {
        fail(ErrorKind::io, "cannot write " + (dir / "adapters.m3ft").string());
    }
    for (const auto& t : set.targets) {
        ad::write_tensor(seg, store.get(a_name(set.tag, t)));
        ad::write_tensor(seg, store.get(b_name(set.tag, t)));
    }
    ordered_json meta{{"format", "m3f-adapters"},
                      {"tag", set.tag},
                      {"rank", set.rank},
                      {"alpha", set.alpha},
                      {"targets", set.targets},
                      {"segment", "adapters.m3ft"}};
    std::ofstream(dir / "adapters.json") << meta.dump(2) << '\n';
}

AdapterSet load_adapters(ParamStore& store, const fs::path& dir) {
    const json meta = parse_json_file((dir / "adapters.json").string());
    AdapterSet set;
    try {
        set.tag = meta.at("tag").get<std::string>();
        set.rank = meta.at("rank").get<std::size_t>();
        set.alpha = meta.at("alpha").get<float>();
        set.targets = meta.at("targets").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        fail(ErrorKind::parse, fmt::format("{}: {}", (dir / "adapters.json").string(), e.what()));
    }
    const auto records = ad::read_tensor_segment(dir / "adapters.m3ft");
    if (records.size() != 2 * set.targets.size()) {
        fail(ErrorKind::parse, fmt::format("{} holds {} tensors, expected {}", (dir / "adapters.m3ft").string(),
                                           records.size(), 2 * set.targets.size()));
    }
    // Attach with throwaway factors, then overwrite them with the stored ones.
    Rng unused(0);
    set = attach(store, set.targets, set.rank, set.alpha, unused, set.tag);
    for (std::size_t i = 0; i < set.targets.size(); ++i) {
        for (std::size_t f = 0; f < 2; ++f) {
            const auto name = f == 0 ? a_name(set.tag, set.targets[i]) : b_name(set.tag, set.targets[i]);
            Tensor& t = store.get(name);
            const auto& rec = records[2 * i + f];
            if (rec.shape != t.shape()) {
                fail(ErrorKind::validation, fmt::format("adapter tensor {} has shape {}, expected {}", name,
                                                        ad::shape_string(rec.shape), ad::shape_string(t.shape())));
            }
            std::copy(rec.values.begin(), rec.values.end(), t.mutable_values().begin());
        }
    }
    return set;
}

}  // namespace m3f::adapters
