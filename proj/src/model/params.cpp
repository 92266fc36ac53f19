#include "model/params.hpp"

#include <cmath>

#include <fmt/format.h>

#include "common/error.hpp"

namespace m3f::model {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
    if (index_.contains(name)) {
        fail(ErrorKind::configuration, "duplicate parameter " + name);
    }
    order_.push_back(name);
    return index_.emplace(name, std::move(value)).first->second;
}

void ParamStore::remove(const std::string& name) {
    if (index_.erase(name) == 0) {
        fail(ErrorKind::configuration, "unknown parameter " + name);
    }
    std::erase(order_, name);
}

const Tensor& ParamStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
        fail(ErrorKind::configuration, "unknown parameter " + name);
    }
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
}

const Tensor* ParamStore::find(const std::string& name) const {
    const auto it = index_.find(name);
    return it == index_.end() ? nullptr : &it->second;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : index_) {
        n += t.size();
    }
    return n;
}

const AdapterSlot* ParamStore::adapter_for(const std::string& weight) const {
    if (adapters_.empty()) {
        return nullptr;
    }
    const auto it = adapters_.find(weight);
    return it == adapters_.end() ? nullptr : &it->second;
}

void ParamStore::zero_grads() {
    for (auto& [name, t] : index_) {
        t.zero_grad();
    }
}

Tensor normal_tensor(Shape shape, float stddev, Rng& rng) {
    std::vector<float> v(ad::element_count(shape));
    for (auto& x : v) {
        x = stddev * static_cast<float>(rng.normal());
    }
    return Tensor::from(std::move(shape), std::move(v), true);
}

void add_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                bool with_bias) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(in));
    std::vector<float> w(in * out);
    for (auto& x : w) {
        x = rng.uniform(-bound, bound);
    }
    store.add(prefix + ".weight", Tensor::from({out, in}, std::move(w), true));
    if (with_bias) {
        store.add(prefix + ".bias", Tensor::zeros({out}, true));
    }
}

void add_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
    store.add(prefix + ".gain", Tensor::filled({d}, 1.0f, true));
    store.add(prefix + ".bias", Tensor::zeros({d}, true));
}

Tensor apply_linear(Tape& tape, const ParamStore& store, const Tensor& x, const std::string& prefix) {
    const std::string weight = prefix + ".weight";
    const Tensor* bias = store.find(prefix + ".bias");
    Tensor y = ad::linear(tape, x, store.get(weight), bias ? *bias : Tensor{});
    if (const AdapterSlot* slot = store.adapter_for(weight)) {
        const Tensor low = ad::linear(tape, x, store.get(slot->a_name));
        const Tensor delta = ad::linear(tape, low, store.get(slot->b_name));
        y = ad::add(tape, y, ad::scale(tape, delta, slot->scaling()));
    }
    return y;
}

Tensor apply_layer_norm(Tape& tape, const ParamStore& store, const Tensor& x, const std::string& prefix) {
    return ad::layer_norm(tape, x, store.get(prefix + ".gain"), store.get(prefix + ".bias"));
}

}  // namespace m3f::model
