#include "train/stages.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <fmt/format.h>

#include "adapters/adapters.hpp"
#include "common/error.hpp"
#include "data/augment.hpp"
#include "data/prompt.hpp"
#include "eval/metrics.hpp"
#include "masking/masking.hpp"
#include "train/optimizer.hpp"

namespace m3f::train {

using adapters::FreezePolicy;
using adapters::Stage;
using data::Dataset;
using data::Modality;
using data::Sample;

namespace {

constexpr std::uint64_t kOrderSalt = 0x6f72646572;
constexpr std::uint64_t kPromptSalt = 0x70726f6d;
constexpr std::uint64_t kMaskSalt = 0x6d61736b;
constexpr std::uint64_t kAugmentSalt = 0x61756774;
constexpr std::uint64_t kAdapterSalt = 0x6164617074;

std::size_t total_scalars(const TrainState& st) { return st.model.params.scalar_count(); }

// Labels of each modality in first-appearance order.
std::map<Modality, std::vector<std::string>> labels_by_modality(const Dataset& ds) {
    std::map<Modality, std::vector<std::string>> out;
    for (const auto& label : ds.classes()) {
        out[ds.sample(ds.members(label).front()).modality].push_back(label);
    }
    return out;
}

// Gold plus up to n_way - 1 distinct distractors of the same modality, shuffled.
std::vector<std::string> pick_options(const std::vector<std::string>& pool, const std::string& gold,
                                      std::size_t n_way, Rng& rng) {
    std::vector<std::string> others;
    for (const auto& l : pool) {
        if (l != gold) {
            others.push_back(l);
        }
    }
    std::vector<std::string> options{gold};
    for (auto i : rng.choose(others.size(), std::min(n_way - 1, others.size()))) {
        options.push_back(others[i]);
    }
    rng.shuffle(options);
    return options;
}

decoder::TokenSequence prompt_for(const data::PromptTemplate& t, const Sample& s,
                                  std::span<const std::string> options) {
    return decoder::tokenize_prompt(data::render_prompt(t, s, options));
}

// One forward (and, when training, backward of weight * loss) for a label prompt.
double label_pass(TrainState& st, const Sample& s, const masking::MaskedView* view,
                  const decoder::TokenSequence& prompt, const std::string& gold, std::span<const std::string> options,
                  double weight, bool train, int stage) {
    ad::Tape tape(train);
    const auto media = model::media_tokens(tape, st.model, s, view);
    const ad::Tensor blocks[] = {media.tokens};
    const auto ce = decoder::label_loss(tape, st.model.params, st.model.config.decoder, prompt, blocks, gold, options);
    const double loss = ce.loss.item();
    if (!std::isfinite(loss)) {
        fail(ErrorKind::training, fmt::format("stage {}: non-finite loss on sample {}; aborting", stage, s.id));
    }
    if (train) {
        tape.backward(ad::scale(tape, ce.loss, static_cast<float>(weight)));
    }
    return loss;
}

struct Prepared {
    std::vector<std::string> names;
    std::size_t trainable = 0;
};

Prepared prepare(TrainState& st, const FreezePolicy& policy) {
    Prepared p;
    p.trainable = adapters::apply_policy(st.model.params, policy);
    p.names = adapters::trainable_params(st.model.params, policy);
    return p;
}

void record_classes(TrainState& st, const Dataset& ds) {
    auto& seen = st.lineage.pretrain_classes;
    for (const auto& label : ds.classes()) {
        if (std::find(seen.begin(), seen.end(), label) == seen.end()) {
            seen.push_back(label);
        }
    }
}

void finish_stage(TrainState& st, const Dataset& ds, int stage) {
    record_classes(st, ds);
    st.lineage.stages.push_back(stage);
}

void require_stage(const TrainState& st, int needed, int running) {
    if (!st.lineage.has(needed)) {
        fail(ErrorKind::validation, fmt::format("stage {} needs a checkpoint whose lineage includes stage {} (has [{}])",
                                                running, needed, fmt::join(st.lineage.stages, ", ")));
    }
}

adapters::AdapterSet& ensure_base_adapters(TrainState& st, const AdapterConfig& acfg, std::uint64_t seed) {
    if (auto* existing = st.adapter_set("base"); existing != nullptr && !existing->merged) {
        return *existing;
    }
    std::erase_if(st.adapter_sets, [](const adapters::AdapterSet& s) { return s.tag == "base"; });
    Rng rng(mix_seed(seed, kAdapterSalt));
    st.adapter_sets.push_back(adapters::attach(st.model.params, adapters::default_targets(st.model.config.decoder),
                                               acfg.rank, acfg.alpha, rng, "base"));
    return st.adapter_sets.back();
}

// Fixed held-in batch: the first `n` samples, first template, seeded options.
struct HeldIn {
    std::vector<std::size_t> samples;
    std::vector<std::vector<std::string>> options;
};

HeldIn make_heldin(const Dataset& ds, const std::map<Modality, std::vector<std::string>>& pools, std::size_t n,
                   std::size_t n_way, std::uint64_t seed) {
    HeldIn h;
    Rng rng(mix_seed(seed, kPromptSalt + 1));
    for (std::size_t i = 0; i < std::min(n, ds.size()); ++i) {
        const auto& s = ds.sample(i);
        h.samples.push_back(i);
        h.options.push_back(pick_options(pools.at(s.modality), s.class_label, n_way, rng));
    }
    return h;
}

double heldin_loss(TrainState& st, const Dataset& ds, const HeldIn& h, int stage) {
    const auto& t = data::template_bank(data::TaskKind::classification)[0];
    double total = 0.0;
    for (std::size_t i = 0; i < h.samples.size(); ++i) {
        const auto& s = ds.sample(h.samples[i]);
        total += label_pass(st, s, nullptr, prompt_for(t, s, h.options[i]), s.class_label, h.options[i], 1.0, false,
                            stage);
    }
    return total / static_cast<double>(h.samples.size());
}

ordered_json step_record(std::size_t step, int stage, std::size_t phase, std::size_t epoch, double loss, float lr,
                         double ratio, std::size_t applications) {
    return ordered_json{{"kind", "step"}, {"step", step},     {"stage", stage},
                        {"phase", phase}, {"epoch", epoch},   {"loss", loss},
                        {"lr", lr},       {"masked_ratio", ratio}, {"applications", applications}};
}

struct Phase {
    std::size_t n_way;
    std::optional<double> ratio;  // nullopt: unmasked inputs
    std::size_t applications;
    std::size_t epochs;
};

// Shared loop of stages 1 and 2.
void classification_epochs(TrainState& st, const Dataset& ds, const StageConfig& cfg, const std::vector<Phase>& phases,
                           const Prepared& prep, TrainLog& log, std::uint64_t seed, int stage, StageReport& report) {
    const auto pools = labels_by_modality(ds);
    const auto bank = data::template_bank(data::TaskKind::classification);
    const HeldIn heldin = make_heldin(ds, pools, cfg.batch_size, cfg.n_way, seed);
    report.heldin.push_back(heldin_loss(st, ds, heldin, stage));
    log.write({{"kind", "heldin"}, {"stage", stage}, {"epoch", 0}, {"loss", report.heldin.back()}});

    OptimizerState opt;
    opt.config.lr = cfg.lr;
    Rng order_rng(mix_seed(seed, kOrderSalt));
    Rng prompt_rng(mix_seed(seed, kPromptSalt));
    Rng aug_rng(mix_seed(seed, kAugmentSalt));
    const std::size_t patch = st.model.config.encoder.patch;
    std::size_t step = 0, epoch = 0;
    for (std::size_t ph = 0; ph < phases.size(); ++ph) {
        const Phase& phase = phases[ph];
        for (std::size_t e = 0; e < phase.epochs; ++e, ++epoch) {
            std::vector<std::size_t> order(ds.size());
            std::iota(order.begin(), order.end(), 0);
            order_rng.shuffle(order);
            double epoch_sum = 0.0;
            std::size_t epoch_count = 0;
            for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
                const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
                const double weight = 1.0 / static_cast<double>((b1 - b0) * phase.applications);
                st.model.params.zero_grads();
                double batch_sum = 0.0;
                ordered_json templates = ordered_json::array();
                for (std::size_t i = b0; i < b1; ++i) {
                    const std::size_t idx = order[i];
                    Sample s = cfg.augment ? data::augment(ds.sample(idx), aug_rng) : ds.sample(idx);
                    const auto& tmpl = bank[prompt_rng.uniform_index(bank.size())];
                    templates.push_back(tmpl.id);
                    const auto options = pick_options(pools.at(s.modality), s.class_label, phase.n_way, prompt_rng);
                    const auto prompt = prompt_for(tmpl, s, options);
                    for (std::size_t a = 0; a < phase.applications; ++a) {
                        std::optional<masking::MaskedView> view;
                        if (phase.ratio) {
                            const std::uint64_t mseed = mix_seed(mix_seed(seed, kMaskSalt), epoch * ds.size() + idx);
                            view = masking::mask_sample(s, patch, {s.modality, *phase.ratio, mseed, a});
                        }
                        batch_sum += label_pass(st, s, view ? &*view : nullptr, prompt, s.class_label, options, weight,
                                                true, stage);
                    }
                }
                optimize_step(st.model.params, prep.names, opt);
                const double loss = batch_sum / static_cast<double>((b1 - b0) * phase.applications);
                report.step_losses.push_back(loss);
                auto rec = step_record(step++, stage, ph, epoch, loss, cfg.lr, phase.ratio.value_or(0.0),
                                       phase.applications);
                rec["templates"] = templates;
                log.write(std::move(rec));
                epoch_sum += loss * static_cast<double>(b1 - b0);
                epoch_count += b1 - b0;
            }
            report.epoch_losses.push_back(epoch_sum / static_cast<double>(std::max<std::size_t>(epoch_count, 1)));
            report.heldin.push_back(heldin_loss(st, ds, heldin, stage));
            log.write({{"kind", "epoch"},
                       {"stage", stage},
                       {"phase", ph},
                       {"epoch", epoch + 1},
                       {"loss", report.epoch_losses.back()},
                       {"heldin_loss", report.heldin.back()}});
        }
    }
}

}  // namespace

DataSplit split_classes(const Dataset& ds, std::size_t heldout_per_modality, std::uint64_t seed) {
    std::vector<std::string> heldout;
    Rng rng(mix_seed(seed, 0x73706c6974));
    for (const auto& [mod, labels] : labels_by_modality(ds)) {
        if (labels.size() < heldout_per_modality + 2) {
            fail(ErrorKind::validation,
                 fmt::format("modality {} has {} classes; holding out {} leaves fewer than 2 for pretraining",
                             data::to_string(mod), labels.size(), heldout_per_modality));
        }
        for (auto i : rng.choose(labels.size(), heldout_per_modality)) {
            heldout.push_back(labels[i]);
        }
    }
    std::vector<std::string> pretrain;
    for (const auto& label : ds.classes()) {
        if (std::find(heldout.begin(), heldout.end(), label) == heldout.end()) {
            pretrain.push_back(label);
        }
    }
    return {ds.subset(pretrain), ds.subset(heldout)};
}

StageReport run_stage1(TrainState& st, const Dataset& ds, const StageConfig& cfg, TrainLog& log, std::uint64_t seed) {
    if (ds.size() == 0) {
        fail(ErrorKind::validation, "stage 1 needs a non-empty dataset");
    }
    for (const auto& set : st.adapter_sets) {
        if (!set.merged) {
            fail(ErrorKind::usage, fmt::format("stage 1 is full fine-tuning; adapter set \"{}\" is attached", set.tag));
        }
    }
    StageReport report;
    report.stage = 1;
    const Prepared prep = prepare(st, {Stage::knowledge, std::nullopt});
    report.trainable_scalars = prep.trainable;
    report.total_scalars = total_scalars(st);
    if (report.trainable_scalars != report.total_scalars) {
        fail(ErrorKind::training, "stage 1 expects every parameter to be trainable");
    }
    log.write({{"kind", "stage_start"},
               {"stage", 1},
               {"trainable", report.trainable_scalars},
               {"total", report.total_scalars}});
    classification_epochs(st, ds, cfg, {{cfg.n_way, std::nullopt, 1, cfg.epochs}}, prep, log, seed, 1, report);
    finish_stage(st, ds, 1);
    return report;
}

StageReport run_stage2(TrainState& st, const Dataset& ds, const StageConfig& cfg, const CurriculumSchedule& schedule,
                       const AdapterConfig& acfg, TrainLog& log, std::uint64_t seed) {
    require_stage(st, 1, 2);
    validate(schedule);
    if (ds.size() == 0) {
        fail(ErrorKind::validation, "stage 2 needs a non-empty dataset");
    }
    std::vector<Phase> phases;
    if (!schedule.phases.empty()) {
        for (const auto& p : schedule.phases) {
            phases.push_back({p.n_way, p.ratio, p.applications, p.epochs});
        }
    } else if (cfg.masking) {
        phases.push_back({cfg.n_way, cfg.masking->ratio, cfg.masking->applications_per_sample, cfg.epochs});
    } else {
        phases.push_back({cfg.n_way, std::nullopt, 1, cfg.epochs});
    }
    ensure_base_adapters(st, acfg, seed);
    StageReport report;
    report.stage = 2;
    const Prepared prep = prepare(st, {Stage::curriculum, std::nullopt});
    report.trainable_scalars = prep.trainable;
    report.total_scalars = total_scalars(st);
    log.write({{"kind", "stage_start"},
               {"stage", 2},
               {"trainable", report.trainable_scalars},
               {"total", report.total_scalars},
               {"curriculum", to_json(schedule)}});
    classification_epochs(st, ds, cfg, phases, prep, log, seed, 2, report);
    finish_stage(st, ds, 2);
    return report;
}

StageReport run_stage3(TrainState& st, const Dataset& ds, const StageConfig& cfg, const AdapterConfig& acfg,
                       TrainLog& log, std::uint64_t seed) {
    require_stage(st, 2, 3);
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.sample(i).description) {
            subset.push_back(i);
        }
    }
    if (subset.empty()) {
        fail(ErrorKind::validation, "stage 3 needs samples with descriptions; the subset is empty");
    }
    if (!acfg.share_across_stages) {
        if (auto* base = st.adapter_set("base"); base != nullptr && !base->merged) {
            adapters::merge(st.model.params, *base);
        }
    }
    ensure_base_adapters(st, acfg, mix_seed(seed, 3));
    StageReport report;
    report.stage = 3;
    const Prepared prep = prepare(st, {Stage::generation, std::nullopt});
    report.trainable_scalars = prep.trainable;
    report.total_scalars = total_scalars(st);
    log.write({{"kind", "stage_start"},
               {"stage", 3},
               {"trainable", report.trainable_scalars},
               {"total", report.total_scalars},
               {"samples", subset.size()}});

    const auto bank = data::template_bank(data::TaskKind::generation);
    auto sequence = [&](const data::PromptTemplate& t, const Sample& s) {
        auto seq = decoder::tokenize_prompt(data::render_prompt(t, s, {}));
        seq.loss_mask.assign(seq.ids.size(), 0);
        decoder::append_answer(seq, *s.description);
        return seq;
    };
    // Returns the mean token loss and adds the target count to *tokens.
    auto pass = [&](const Sample& s, const decoder::TokenSequence& seq, double weight, bool train,
                    std::size_t* tokens) {
        ad::Tape tape(train);
        const auto media = model::media_tokens(tape, st.model, s);
        const ad::Tensor blocks[] = {media.tokens};
        const auto ce = decoder::sequence_loss(tape, st.model.params, st.model.config.decoder, seq, blocks);
        const double loss = ce.loss.item();
        if (!std::isfinite(loss)) {
            fail(ErrorKind::training, fmt::format("stage 3: non-finite loss on sample {}; aborting", s.id));
        }
        if (train) {
            tape.backward(ad::scale(tape, ce.loss, static_cast<float>(weight)));
        }
        if (tokens != nullptr) {
            *tokens += ce.counted;
        }
        return loss;
    };

    OptimizerState opt;
    opt.config.lr = cfg.lr;
    Rng order_rng(mix_seed(seed, kOrderSalt + 3));
    Rng prompt_rng(mix_seed(seed, kPromptSalt + 3));
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = subset;
        order_rng.shuffle(order);
        double epoch_sum = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            const double weight = 1.0 / static_cast<double>(b1 - b0);
            st.model.params.zero_grads();
            double batch_sum = 0.0;
            for (std::size_t i = b0; i < b1; ++i) {
                const auto& s = ds.sample(order[i]);
                batch_sum += pass(s, sequence(bank[prompt_rng.uniform_index(bank.size())], s), weight, true, nullptr);
            }
            optimize_step(st.model.params, prep.names, opt);
            const double loss = batch_sum / static_cast<double>(b1 - b0);
            report.step_losses.push_back(loss);
            log.write(step_record(step++, 3, 0, epoch, loss, cfg.lr, 0.0, 1));
            epoch_sum += loss * static_cast<double>(b1 - b0);
        }
        report.epoch_losses.push_back(epoch_sum / static_cast<double>(order.size()));
        double nll = 0.0;
        std::size_t tokens = 0;
        for (auto idx : subset) {
            const auto& s = ds.sample(idx);
            std::size_t n = 0;
            const double loss = pass(s, sequence(bank[0], s), 1.0, false, &n);
            nll += loss * static_cast<double>(n);
            tokens += n;
        }
        report.heldin.push_back(std::exp(nll / static_cast<double>(tokens)));
        log.write({{"kind", "epoch"},
                   {"stage", 3},
                   {"epoch", epoch + 1},
                   {"loss", report.epoch_losses.back()},
                   {"perplexity", report.heldin.back()}});
    }
    finish_stage(st, ds, 3);
    return report;
}

std::size_t predict_label(const TrainState& st, const Sample& s, std::span<const std::string> options) {
    const auto& t = data::template_bank(data::TaskKind::classification)[0];
    ad::Tape tape(false);
    const auto media = model::media_tokens(tape, st.model, s);
    const ad::Tensor blocks[] = {media.tokens};
    return decoder::classify_options(st.model.params, st.model.config.decoder, prompt_for(t, s, options), blocks,
                                     options);
}

Stage4Report run_stage4(TrainState& st, const Dataset& target, std::span<const data::Episode> episodes,
                        const StageConfig& cfg, const AdapterConfig& acfg, TrainLog& log, std::uint64_t seed,
                        bool zero_shot_control) {
    if (st.lineage.stages.empty()) {
        fail(ErrorKind::validation, "stage 4 needs a checkpoint from stage 1, 2 or 3");
    }
    const auto& seen = st.lineage.pretrain_classes;
    for (const auto& ep : episodes) {
        if (ep.params.k_shot == 0 || ep.params.k_shot > data::kMaxPerClass) {
            fail(ErrorKind::validation, fmt::format("stage 4: k_shot {} is outside 1..{}", ep.params.k_shot,
                                                    data::kMaxPerClass));
        }
        for (const auto& label : ep.labels) {
            if (std::find(seen.begin(), seen.end(), label) != seen.end()) {
                fail(ErrorKind::validation,
                     fmt::format("stage 4: class \"{}\" was used in stages 1-3; few-shot classes must be new", label));
            }
        }
    }
    for (auto& set : st.adapter_sets) {
        if (!set.merged) {
            adapters::merge(st.model.params, set);
            log.write({{"kind", "merge"}, {"stage", 4}, {"tag", set.tag}});
        }
    }
    log.write({{"kind", "stage_start"}, {"stage", 4}, {"from_stages", st.lineage.stages}, {"episodes", episodes.size()}});

    Stage4Report report;
    const auto bank = data::template_bank(data::TaskKind::classification);
    std::vector<std::size_t> all_preds, all_golds, all_control;
    for (std::size_t e = 0; e < episodes.size(); ++e) {
        const auto& ep = episodes[e];
        const Modality mod = target.sample(ep.support.front().sample).modality;
        for (const auto& item : ep.support) {
            if (target.sample(item.sample).modality != mod) {
                fail(ErrorKind::validation, fmt::format("stage 4: episode {} mixes modalities", e));
            }
        }
        EpisodeOutcome out;
        out.seed = ep.seed;
        out.labels = ep.labels;
        for (const auto& q : ep.query) {
            out.query_ids.push_back(target.sample(q.sample).id);
            out.golds.push_back(q.class_index);
            if (zero_shot_control) {
                out.control_preds.push_back(predict_label(st, target.sample(q.sample), ep.labels));
            }
        }

        const std::string prefix = encoders::encoder_prefix(mod) + ".";
        std::vector<std::pair<std::string, std::vector<float>>> snapshot;
        for (const auto& name : st.model.params.names()) {
            if (name.rfind(prefix, 0) == 0) {
                const auto v = st.model.params.get(name).values();
                snapshot.emplace_back(name, std::vector<float>(v.begin(), v.end()));
            }
        }
        Rng rng(mix_seed(seed, ep.seed));
        auto task = adapters::attach(st.model.params, adapters::default_targets(st.model.config.decoder), acfg.rank,
                                     acfg.alpha, rng, "task");
        const Prepared prep = prepare(st, {Stage::task, mod});
        if (e == 0) {
            report.trainable_scalars = prep.trainable;
            report.total_scalars = total_scalars(st);
            report.frozen_fraction =
                1.0 - static_cast<double>(prep.trainable) / static_cast<double>(report.total_scalars);
            log.write({{"kind", "policy"},
                       {"stage", 4},
                       {"trainable", report.trainable_scalars},
                       {"total", report.total_scalars},
                       {"frozen_fraction", report.frozen_fraction}});
        }

        OptimizerState opt;
        opt.config.lr = cfg.lr;
        std::vector<std::size_t> order;
        std::size_t cursor = 0;
        for (std::size_t step = 0; step < cfg.steps; ++step) {
            st.model.params.zero_grads();
            double batch_sum = 0.0;
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                if (cursor == order.size()) {
                    order.resize(ep.support.size());
                    std::iota(order.begin(), order.end(), 0);
                    rng.shuffle(order);
                    cursor = 0;
                }
                const auto& item = ep.support[order[cursor++]];
                Sample s = cfg.augment ? data::augment(target.sample(item.sample), rng) : target.sample(item.sample);
                // Options in episode class order, as at prediction time.
                const auto prompt = prompt_for(bank[rng.uniform_index(bank.size())], s, ep.labels);
                batch_sum += label_pass(st, s, nullptr, prompt, ep.labels[item.class_index], ep.labels,
                                        1.0 / static_cast<double>(cfg.batch_size), true, 4);
            }
            optimize_step(st.model.params, prep.names, opt);
            out.step_losses.push_back(batch_sum / static_cast<double>(cfg.batch_size));
        }
        for (const auto& q : ep.query) {
            out.preds.push_back(predict_label(st, target.sample(q.sample), ep.labels));
        }
        adapters::detach(st.model.params, task);
        for (auto& [name, values] : snapshot) {
            auto dst = st.model.params.get(name).mutable_values();
            std::copy(values.begin(), values.end(), dst.begin());
        }

        all_preds.insert(all_preds.end(), out.preds.begin(), out.preds.end());
        all_golds.insert(all_golds.end(), out.golds.begin(), out.golds.end());
        all_control.insert(all_control.end(), out.control_preds.begin(), out.control_preds.end());
        ordered_json rec{{"kind", "episode"},
                         {"stage", 4},
                         {"episode", e},
                         {"seed", ep.seed},
                         {"query_ids", out.query_ids},
                         {"golds", out.golds},
                         {"preds", out.preds}};
        if (!out.step_losses.empty()) {
            rec["loss"] = out.step_losses.back();
        }
        if (zero_shot_control) {
            rec["control_preds"] = out.control_preds;
        }
        log.write(std::move(rec));
        report.episodes.push_back(std::move(out));
    }
    if (!episodes.empty()) {
        const std::size_t n_way = episodes.front().labels.size();
        report.micro_f1 = eval::micro_f1(all_preds, all_golds, n_way);
        if (zero_shot_control) {
            report.control_micro_f1 = eval::micro_f1(all_control, all_golds, n_way);
        }
    }
    // Leave every parameter frozen except what a later stage re-enables.
    adapters::apply_policy(st.model.params, {Stage::knowledge, std::nullopt});
    return report;
}

}  // namespace m3f::train
