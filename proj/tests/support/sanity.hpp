#pragma once

#include <string>
#include <vector>

#include "adapters/adapters.hpp"
#include "data/prompt.hpp"
#include "decoder/decoder.hpp"
#include "train/checkpoint.hpp"
#include "train/optimizer.hpp"

// Single-batch optimization runs shared by the unit and acceptance suites.
namespace m3f::testing {

struct OverfitRun {
    std::vector<double> losses;  // one per step, stops once below the target
    bool reached = false;
};

inline decoder::TokenSequence first_template_prompt(const data::Sample& s, std::span<const std::string> options) {
    return decoder::tokenize_prompt(
        data::render_prompt(data::template_bank(data::TaskKind::classification)[0], s, options));
}

/// Full-model label loss on a fixed batch (first template, fixed options).
inline OverfitRun overfit_labels(train::TrainState& st, const std::vector<data::Sample>& batch,
                                 const std::vector<std::string>& options, std::size_t max_steps, float lr,
                                 double target = 1e-2) {
    const adapters::FreezePolicy policy{adapters::Stage::knowledge, std::nullopt};
    adapters::apply_policy(st.model.params, policy);
    const auto names = adapters::trainable_params(st.model.params, policy);
    train::OptimizerState opt;
    opt.config.lr = lr;
    std::vector<decoder::TokenSequence> prompts;
    for (const auto& s : batch) {
        prompts.push_back(first_template_prompt(s, options));
    }
    OverfitRun run;
    for (std::size_t step = 0; step < max_steps; ++step) {
        st.model.params.zero_grads();
        double sum = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            ad::Tape tape;
            const ad::Tensor media[] = {model::media_tokens(tape, st.model, batch[i]).tokens};
            const auto ce = decoder::label_loss(tape, st.model.params, st.model.config.decoder, prompts[i], media,
                                                batch[i].class_label, options);
            sum += ce.loss.item();
            tape.backward(ad::scale(tape, ce.loss, 1.0f / static_cast<float>(batch.size())));
        }
        run.losses.push_back(sum / static_cast<double>(batch.size()));
        if (run.losses.back() < target) {
            run.reached = true;
            break;
        }
        train::optimize_step(st.model.params, names, opt);
    }
    return run;
}

inline decoder::TokenSequence description_prompt(const data::Sample& s) {
    return decoder::tokenize_prompt(
        data::render_prompt(data::template_bank(data::TaskKind::generation)[0], s, {}));
}

/// Generation loss on one description under `policy` (adapters, if any,
/// attached by the caller).
inline OverfitRun overfit_description(train::TrainState& st, const data::Sample& s, std::size_t max_steps, float lr,
                                      const adapters::FreezePolicy& policy, double target = 1e-2) {
    adapters::apply_policy(st.model.params, policy);
    const auto names = adapters::trainable_params(st.model.params, policy);
    train::OptimizerState opt;
    opt.config.lr = lr;
    auto seq = description_prompt(s);
    seq.loss_mask.assign(seq.ids.size(), 0);
    decoder::append_answer(seq, *s.description);
    OverfitRun run;
    for (std::size_t step = 0; step < max_steps; ++step) {
        st.model.params.zero_grads();
        ad::Tape tape;
        const ad::Tensor media[] = {model::media_tokens(tape, st.model, s).tokens};
        const auto ce = decoder::sequence_loss(tape, st.model.params, st.model.config.decoder, seq, media);
        run.losses.push_back(ce.loss.item());
        if (run.losses.back() < target) {
            run.reached = true;
            break;
        }
        tape.backward(ce.loss);
        train::optimize_step(st.model.params, names, opt);
    }
    return run;
}

inline std::string greedy_description(const train::TrainState& st, const data::Sample& s) {
    ad::Tape tape(false);
    const ad::Tensor media[] = {model::media_tokens(tape, st.model, s).tokens};
    const auto ids = decoder::generate_greedy(st.model.params, st.model.config.decoder, description_prompt(s), media,
                                              s.description->size() + 8);
    return decoder::render_output(ids);
}

}  // namespace m3f::testing
