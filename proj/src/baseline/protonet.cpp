#include "baseline/protonet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "common/error.hpp"
#include "eval/metrics.hpp"
#include "train/optimizer.hpp"

namespace m3f::baseline {

using data::Modality;
using data::Sample;

namespace {

std::string net_prefix(Modality m) { return fmt::format("proto.{}", data::to_string(m)); }

std::size_t input_dim(Modality m, const ProtoConfig& cfg) {
    switch (m) {
    case Modality::image2d_gray:
        return cfg.grid * cfg.grid;
    case Modality::image2d_rgb:
        return cfg.grid * cfg.grid * 3;
    case Modality::volume3d:
        return (cfg.grid / 2) * cfg.grid * cfg.grid;
    case Modality::tabular:
        return 2 * cfg.columns;
    case Modality::timecourse:
        return cfg.steps * cfg.features;
    }
    fail(ErrorKind::validation, "unhandled modality");
}

// Half-open source range covered by output bin i of n over a length-len axis.
std::pair<std::size_t, std::size_t> bin(std::size_t i, std::size_t n, std::size_t len) {
    const std::size_t lo = i * len / n;
    const std::size_t hi = std::max(lo + 1, ((i + 1) * len + n - 1) / n);
    return {lo, std::min(hi, len)};
}

// Adaptive average pooling of the leading axes of a row-major array whose
// last axis is `channels`; channels are averaged too when `merge_channels`.
std::vector<float> pool(const data::NdArray& a, std::span<const std::size_t> out_dims, bool merge_channels) {
    const std::size_t rank = a.shape.size() - 1;
    const std::size_t channels = a.shape.back();
    const std::size_t out_c = merge_channels ? 1 : channels;
    std::size_t cells = 1;
    for (auto d : out_dims) {
        cells *= d;
    }
    std::vector<float> out(cells * out_c, 0.0f);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t cell = 0; cell < cells; ++cell) {
        std::size_t rem = cell;
        std::vector<std::pair<std::size_t, std::size_t>> ranges(rank);
        for (std::size_t ax = rank; ax-- > 0;) {
            ranges[ax] = bin(rem % out_dims[ax], out_dims[ax], a.shape[ax]);
            rem /= out_dims[ax];
        }
        for (std::size_t c = 0; c < out_c; ++c) {
            double total = 0.0;
            std::size_t count = 0;
            // Odometer over the source window.
            for (std::size_t ax = 0; ax < rank; ++ax) {
                idx[ax] = ranges[ax].first;
            }
            while (true) {
                std::size_t flat = 0;
                for (std::size_t ax = 0; ax < rank; ++ax) {
                    flat = flat * a.shape[ax] + idx[ax];
                }
                if (merge_channels) {
                    for (std::size_t k = 0; k < channels; ++k) {
                        total += a.values[flat * channels + k];
                    }
                    count += channels;
                } else {
                    total += a.values[flat * channels + c];
                    ++count;
                }
                std::size_t ax = rank;
                while (ax-- > 0) {
                    if (++idx[ax] < ranges[ax].second) {
                        break;
                    }
                    idx[ax] = ranges[ax].first;
                }
                if (ax == static_cast<std::size_t>(-1)) {
                    break;
                }
            }
            out[cell * out_c + c] = static_cast<float>(total / static_cast<double>(count));
        }
    }
    return out;
}

}  // namespace

ProtoConfig proto_config_from_json(const json& j) {
    reject_unknown_keys(j, {"width", "out", "grid", "steps", "features", "columns"}, "protonet model");
    ProtoConfig cfg;
    cfg.width = get_size(j, "width", cfg.width);
    cfg.out = get_size(j, "out", cfg.out);
    cfg.grid = get_size(j, "grid", cfg.grid);
    cfg.steps = get_size(j, "steps", cfg.steps);
    cfg.features = get_size(j, "features", cfg.features);
    cfg.columns = get_size(j, "columns", cfg.columns);
    if (cfg.width == 0 || cfg.out == 0 || cfg.grid < 2 || cfg.steps == 0 || cfg.features == 0 || cfg.columns == 0) {
        fail(ErrorKind::configuration, "protonet dimensions must be positive (grid >= 2)");
    }
    return cfg;
}

json to_json(const ProtoConfig& cfg) {
    return {{"width", cfg.width}, {"out", cfg.out},           {"grid", cfg.grid},
            {"steps", cfg.steps}, {"features", cfg.features}, {"columns", cfg.columns}};
}

ProtoModel init_protonet(const ProtoConfig& cfg, std::uint64_t seed) {
    ProtoModel m{cfg, {}};
    Rng rng(seed);
    for (auto mod : data::kAllModalities) {
        model::add_linear(m.params, net_prefix(mod) + ".fc1", input_dim(mod, cfg), cfg.width, rng);
        model::add_linear(m.params, net_prefix(mod) + ".fc2", cfg.width, cfg.out, rng);
    }
    for (const auto& name : m.params.names()) {
        m.params.get(name).set_requires_grad(true);
    }
    return m;
}

std::vector<float> input_features(const Sample& s, const ProtoConfig& cfg) {
    switch (s.modality) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb: {
        const auto& px = std::get<data::ImagePayload>(s.payload).pixels;
        const std::size_t dims[] = {cfg.grid, cfg.grid};
        return pool(px, dims, s.modality == Modality::image2d_gray);
    }
    case Modality::volume3d: {
        const auto& vx = std::get<data::VolumePayload>(s.payload).voxels;
        const std::size_t dims[] = {cfg.grid / 2, cfg.grid, cfg.grid};
        return pool(vx, dims, true);
    }
    case Modality::tabular: {
        // Column mean and std over rows: invariant to row order.
        const auto& cells = std::get<data::TablePayload>(s.payload).cells;
        const std::size_t rows = cells.shape[0], cols = cells.shape[1];
        std::vector<float> out(2 * cfg.columns, 0.0f);
        for (std::size_t c = 0; c < std::min(cols, cfg.columns); ++c) {
            double sum = 0.0, sq = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double v = cells.values[r * cols + c];
                sum += v;
                sq += v * v;
            }
            const double mean = sum / static_cast<double>(rows);
            out[2 * c] = static_cast<float>(mean);
            out[2 * c + 1] = static_cast<float>(std::sqrt(std::max(0.0, sq / static_cast<double>(rows) - mean * mean)));
        }
        return out;
    }
    case Modality::timecourse: {
        // Linear resampling along time; features beyond cfg.features dropped, missing ones zero.
        const auto& series = std::get<data::TimecoursePayload>(s.payload).series;
        const std::size_t t_len = series.shape[0], f_len = series.shape[1];
        std::vector<float> out(cfg.steps * cfg.features, 0.0f);
        for (std::size_t t = 0; t < cfg.steps; ++t) {
            const double pos =
                cfg.steps == 1 ? 0.0 : static_cast<double>(t) * static_cast<double>(t_len - 1) / (cfg.steps - 1);
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const std::size_t hi = std::min(lo + 1, t_len - 1);
            const double w = pos - static_cast<double>(lo);
            for (std::size_t f = 0; f < std::min(f_len, cfg.features); ++f) {
                const double v = (1.0 - w) * series.values[lo * f_len + f] + w * series.values[hi * f_len + f];
                out[t * cfg.features + f] = static_cast<float>(v);
            }
        }
        return out;
    }
    }
    fail(ErrorKind::validation, "unhandled modality");
}

Tensor embed(Tape& tape, const ProtoModel& m, std::span<const Sample* const> samples) {
    std::vector<Tensor> rows;
    rows.reserve(samples.size());
    for (const auto* s : samples) {
        auto x = input_features(*s, m.config);
        const std::size_t d = x.size();
        const auto input = Tensor::from({1, d}, std::move(x));
        const auto prefix = net_prefix(s->modality);
        const auto h = ad::gelu(tape, model::apply_linear(tape, m.params, input, prefix + ".fc1"));
        rows.push_back(model::apply_linear(tape, m.params, h, prefix + ".fc2"));
    }
    return ad::concat_rows(tape, rows);
}

Tensor prototypes(Tape& tape, const Tensor& support, std::span<const std::size_t> classes, std::size_t n_way) {
    if (classes.size() != support.rows()) {
        fail(ErrorKind::usage, fmt::format("{} support rows but {} class indices", support.rows(), classes.size()));
    }
    std::vector<Tensor> protos;
    for (std::size_t c = 0; c < n_way; ++c) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i] == c) {
                rows.push_back(i);
            }
        }
        if (rows.empty()) {
            fail(ErrorKind::episode, fmt::format("class {} has no support samples", c));
        }
        protos.push_back(ad::mean_rows(tape, ad::gather_rows(tape, support, rows)));
    }
    return ad::concat_rows(tape, protos);
}

Tensor prototype_loss(Tape& tape, const Tensor& support, std::span<const std::size_t> support_classes,
                      const Tensor& query, std::span<const std::size_t> query_classes, std::size_t n_way) {
    const auto protos = prototypes(tape, support, support_classes, n_way);
    const auto logits = ad::scale(tape, ad::sq_dist(tape, query, protos), -1.0f);
    std::vector<std::int32_t> targets(query_classes.begin(), query_classes.end());
    return ad::cross_entropy(tape, logits, targets).loss;
}

std::vector<std::size_t> nearest_prototype(const Tensor& query, const Tensor& protos) {
    Tape tape(false);
    const auto d = ad::sq_dist(tape, query, protos);
    const std::size_t p = protos.rows();
    std::vector<std::size_t> out;
    for (std::size_t q = 0; q < query.rows(); ++q) {
        const auto row = d.values().subspan(q * p, p);
        out.push_back(static_cast<std::size_t>(std::min_element(row.begin(), row.end()) - row.begin()));
    }
    return out;
}

namespace {

struct Split {
    std::vector<const Sample*> support, query;
    std::vector<std::size_t> support_classes, query_classes;
};

Split split_episode(const data::Dataset& ds, const data::Episode& ep) {
    Split s;
    for (const auto& it : ep.support) {
        s.support.push_back(&ds.sample(it.sample));
        s.support_classes.push_back(it.class_index);
    }
    for (const auto& it : ep.query) {
        s.query.push_back(&ds.sample(it.sample));
        s.query_classes.push_back(it.class_index);
    }
    return s;
}

}  // namespace

Tensor episode_loss(Tape& tape, const ProtoModel& m, const data::Dataset& ds, const data::Episode& ep) {
    const auto s = split_episode(ds, ep);
    return prototype_loss(tape, embed(tape, m, s.support), s.support_classes, embed(tape, m, s.query),
                          s.query_classes, ep.labels.size());
}

std::vector<std::size_t> classify(const ProtoModel& m, const data::Dataset& ds, const data::Episode& ep) {
    const auto s = split_episode(ds, ep);
    Tape tape(false);
    const auto protos = prototypes(tape, embed(tape, m, s.support), s.support_classes, ep.labels.size());
    return nearest_prototype(embed(tape, m, s.query), protos);
}

BaselineConfig baseline_config_from_json(const json& j) {
    reject_unknown_keys(j, {"model", "train_episode", "episodes_per_epoch", "epochs", "lr"}, "baseline config");
    BaselineConfig cfg;
    if (j.contains("model")) {
        cfg.model = proto_config_from_json(j.at("model"));
    }
    if (j.contains("train_episode")) {
        const auto& e = j.at("train_episode");
        reject_unknown_keys(e, {"n_way", "k_shot", "q_query"}, "baseline train_episode");
        cfg.train_episode.n_way = get_size(e, "n_way", cfg.train_episode.n_way);
        cfg.train_episode.k_shot = get_size(e, "k_shot", cfg.train_episode.k_shot);
        cfg.train_episode.q_query = get_size(e, "q_query", cfg.train_episode.q_query);
    }
    cfg.episodes_per_epoch = get_size(j, "episodes_per_epoch", cfg.episodes_per_epoch);
    cfg.epochs = get_size(j, "epochs", cfg.epochs);
    cfg.lr = j.value("lr", cfg.lr);
    if (!(cfg.lr > 0.0f)) {
        fail(ErrorKind::configuration, "baseline lr must be positive");
    }
    return cfg;
}

json to_json(const BaselineConfig& cfg) {
    return {{"model", to_json(cfg.model)},
            {"train_episode",
             {{"n_way", cfg.train_episode.n_way},
              {"k_shot", cfg.train_episode.k_shot},
              {"q_query", cfg.train_episode.q_query}}},
            {"episodes_per_epoch", cfg.episodes_per_epoch},
            {"epochs", cfg.epochs},
            {"lr", cfg.lr}};
}

BaselineReport train_baseline(ProtoModel& m, const data::Dataset& train, const data::Dataset& test,
                              std::span<const data::Episode> eval_episodes, const BaselineConfig& cfg,
                              std::uint64_t seed, train::TrainLog* log) {
    for (const auto& ep : eval_episodes) {
        for (const auto& label : ep.labels) {
            if (train.has_class(label)) {
                fail(ErrorKind::validation,
                     fmt::format("baseline: evaluation class \"{}\" is also a training class", label));
            }
        }
    }
    BaselineReport report;
    std::vector<std::string> names(m.params.names().begin(), m.params.names().end());
    train::OptimizerState opt;
    opt.config.lr = cfg.lr;
    // Train episodes never need more ways than there are classes.
    data::EpisodeParams params = cfg.train_episode;
    params.n_way = std::min(params.n_way, train.classes().size());
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        for (std::size_t i = 0; i < cfg.episodes_per_epoch; ++i) {
            const auto ep = data::sample_episode(train, params, mix_seed(seed, step));
            m.params.zero_grads();
            Tape tape;
            const auto loss = episode_loss(tape, m, train, ep);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                fail(ErrorKind::training, fmt::format("baseline: non-finite loss at step {}", step));
            }
            tape.backward(loss);
            train::optimize_step(m.params, names, opt);
            total += value;
            if (log != nullptr) {
                log->write({{"kind", "step"}, {"stage", "baseline"}, {"step", step}, {"epoch", epoch}, {"loss", value},
                            {"lr", cfg.lr}});
            }
            ++step;
        }
        report.epoch_losses.push_back(total / static_cast<double>(std::max<std::size_t>(cfg.episodes_per_epoch, 1)));
    }
    std::vector<std::size_t> all_preds, all_golds;
    std::size_t n_way = 0;
    for (const auto& ep : eval_episodes) {
        auto preds = classify(m, test, ep);
        std::vector<std::size_t> golds;
        for (const auto& q : ep.query) {
            golds.push_back(q.class_index);
        }
        all_preds.insert(all_preds.end(), preds.begin(), preds.end());
        all_golds.insert(all_golds.end(), golds.begin(), golds.end());
        n_way = std::max(n_way, ep.labels.size());
        if (log != nullptr) {
            log->write({{"kind", "episode"}, {"stage", "baseline"}, {"seed", ep.seed}, {"preds", preds},
                        {"golds", golds}});
        }
        report.preds.push_back(std::move(preds));
        report.golds.push_back(std::move(golds));
    }
    if (!eval_episodes.empty()) {
        report.micro_f1 = eval::micro_f1(all_preds, all_golds, n_way);
    }
    return report;
}

}  // namespace m3f::baseline
