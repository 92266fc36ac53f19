#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "data/sample.hpp"
#include "decoder/decoder.hpp"
#include "model/params.hpp"

namespace m3f::adapters {

using model::ParamStore;

struct AdapterSet {
    std::string tag;  // names the set in parameter names: "adapter.<tag>.<target>.A"
    std::vector<std::string> targets;
    std::size_t rank = 0;
    float alpha = 0.0f;
    bool merged = false;

    std::size_t parameter_count(const ParamStore& store) const;
};

/// "adapter.<tag>.<target>.A" or ".B".
std::string factor_name(const std::string& tag, const std::string& target, char which);

/// Decoder attention query/value weights of every layer plus both projector
/// matrices.
std::vector<std::string> default_targets(const decoder::DecoderConfig& cfg);

/// Attaches A ~ U(-1/sqrt(in), 1/sqrt(in)) and B = 0 to each target, so the
/// forward pass is unchanged. alpha <= 0 selects the default 2 * rank.
/// Errors: rank 0 (validation), unknown or non-2D target (configuration), a
/// target that already carries an adapter (usage).
AdapterSet attach(ParamStore& store, const std::vector<std::string>& targets, std::size_t rank, float alpha,
                  Rng& rng, const std::string& tag = "base");

/// W <- W + (alpha / rank) * B * A for every target, then removes the adapter
/// parameters. Usage error on a second merge.
void merge(ParamStore& store, AdapterSet& set);

/// Removes the adapters without touching the base weights.
void detach(ParamStore& store, AdapterSet& set);

enum class Stage { knowledge = 1, curriculum = 2, generation = 3, task = 4 };

struct FreezePolicy {
    Stage stage = Stage::knowledge;
    // Stage 4 only: the modality whose encoder is fine-tuned.
    std::optional<data::Modality> target_modality;

    bool trainable(const std::string& name) const;
};

/// Names satisfying the policy, in registration order.
std::vector<std::string> trainable_params(const ParamStore& store, const FreezePolicy& policy);
/// Sets requires_grad on every parameter from the policy and clears grads.
/// Returns the trainable scalar count.
std::size_t apply_policy(ParamStore& store, const FreezePolicy& policy);

/// Adapter-only checkpoint: <dir>/adapters.json plus <dir>/adapters.m3ft.
void save_adapters(const ParamStore& store, const AdapterSet& set, const std::filesystem::path& dir);
AdapterSet load_adapters(ParamStore& store, const std::filesystem::path& dir);

}  // namespace m3f::adapters
