#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "autodiff/ops.hpp"
#include "common/rng.hpp"

namespace m3f::model {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

// Low-rank factors attached to a 2D weight: W + (alpha / rank) * B * A.
struct AdapterSlot {
    std::string target;  // weight parameter name
    std::size_t rank = 0;
    float alpha = 0.0f;
    std::string a_name;  // [rank x in]
    std::string b_name;  // [out x rank]

    float scaling() const { return alpha / static_cast<float>(rank); }
};

/// Named leaf tensors in registration order, plus the adapters attached to
/// any of them. Adapter factors are themselves parameters ("adapter.*").
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor value);
    void remove(const std::string& name);

    bool contains(const std::string& name) const { return index_.contains(name); }
    // Configuration error for unknown names.
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    const Tensor* find(const std::string& name) const;

    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }
    std::size_t scalar_count() const;

    const std::map<std::string, AdapterSlot>& adapters() const { return adapters_; }
    const AdapterSlot* adapter_for(const std::string& weight) const;
    void set_adapter(AdapterSlot slot) { adapters_[slot.target] = std::move(slot); }
    void drop_adapter(const std::string& weight) { adapters_.erase(weight); }

    void zero_grads();

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> index_;
    std::map<std::string, AdapterSlot> adapters_;
};

// U(-1/sqrt(in), 1/sqrt(in)) weight [out x in] and zero bias under `prefix`.
void add_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                bool with_bias = true);
void add_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d);
Tensor normal_tensor(Shape shape, float stddev, Rng& rng);

/// x * W^T + b for the weight "<prefix>.weight" (bias optional), including the
/// low-rank path when an adapter is attached to that weight.
Tensor apply_linear(Tape& tape, const ParamStore& store, const Tensor& x, const std::string& prefix);
Tensor apply_layer_norm(Tape& tape, const ParamStore& store, const Tensor& x, const std::string& prefix);

}  // namespace m3f::model
