#include "data/generator.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace m3f::data {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kPixelNoise = 0.1;
constexpr double kTableNoise = 1.0;
constexpr double kSeriesNoise = 0.5;

std::string make_label(Rng& rng, std::set<std::string>& taken) {
    static constexpr std::string_view consonants = "bdfghklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    while (true) {
        std::string name;
        for (int s = 0; s < 2; ++s) {
            name += consonants[rng.uniform_index(consonants.size())];
            name += vowels[rng.uniform_index(vowels.size())];
        }
        if (taken.insert(name).second) {
            return name;
        }
    }
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void normalize_rms(std::vector<double>& v) {
    double ss = 0.0;
    for (double x : v) {
        ss += x * x;
    }
    const double rms = std::sqrt(ss / static_cast<double>(v.size()));
    if (rms > 0.0) {
        for (double& x : v) {
            x /= rms;
        }
    }
}

const char* region_name(double y, double x) {
    static const char* names[3][3] = {{"top left", "top", "top right"},
                                      {"left", "centre", "right"},
                                      {"bottom left", "bottom", "bottom right"}};
    const int r = std::clamp(static_cast<int>(y * 3.0), 0, 2);
    const int c = std::clamp(static_cast<int>(x * 3.0), 0, 2);
    return names[r][c];
}

struct ClassModel {
    std::vector<double> prototype;     // flattened over the payload (images/volumes/tables)
    std::vector<double> channel_gain;  // rgb only
    double frequency = 1.0;            // timecourse
    std::vector<double> phases;        // timecourse, per feature
    std::string description;
};

ClassModel make_class(Modality m, const ShapeSpec& sh, const std::string& label, double separation, Rng& rng) {
    ClassModel cm;
    switch (m) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb: {
        const std::size_t h = sh.image_height, w = sh.image_width;
        cm.prototype.assign(h * w, 0.0);
        double first_y = 0.5, first_x = 0.5;
        for (int b = 0; b < 2; ++b) {
            const double cy = rng.uniform(0.15f, 0.85f);
            const double cx = rng.uniform(0.15f, 0.85f);
            const double sign = b == 0 ? 1.0 : (rng.uniform() < 0.5 ? -1.0 : 1.0);
            if (b == 0) {
                first_y = cy;
                first_x = cx;
            }
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const double dy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) - cy;
                    const double dx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) - cx;
                    cm.prototype[y * w + x] += 0.7 * sign * std::exp(-(dy * dy + dx * dx) / (2 * 0.15 * 0.15));
                }
            }
        }
        const double freq = 1.0 + 2.0 * rng.uniform();
        const double theta = kPi * rng.uniform();
        const double phase = 2.0 * kPi * rng.uniform();
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double u = (std::cos(theta) * static_cast<double>(x) + std::sin(theta) * static_cast<double>(y)) /
                                 static_cast<double>(w);
                cm.prototype[y * w + x] += 0.3 * std::sin(2.0 * kPi * freq * u + phase);
            }
        }
        normalize_rms(cm.prototype);
        if (m == Modality::image2d_rgb) {
            for (int c = 0; c < 3; ++c) {
                cm.channel_gain.push_back(0.3 + 0.7 * rng.uniform());
            }
        }
        cm.description = fmt::format("{} is an image with a bright blob near the {} and {} stripes.", label,
                                     region_name(first_y, first_x), freq < 2.0 ? "wide" : "narrow");
        break;
    }
    case Modality::volume3d: {
        const std::size_t d = sh.volume_depth, h = sh.volume_height, w = sh.volume_width;
        cm.prototype.assign(d * h * w, 0.0);
        const double cz = rng.uniform(0.2f, 0.8f), cy = rng.uniform(0.2f, 0.8f), cx = rng.uniform(0.2f, 0.8f);
        for (std::size_t z = 0; z < d; ++z) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    const double dz = (static_cast<double>(z) + 0.5) / static_cast<double>(d) - cz;
                    const double dy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) - cy;
                    const double dx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) - cx;
                    cm.prototype[(z * h + y) * w + x] = std::exp(-(dz * dz + dy * dy + dx * dx) / (2 * 0.2 * 0.2));
                }
            }
        }
        double mean = 0.0;
        for (double v : cm.prototype) {
            mean += v;
        }
        mean /= static_cast<double>(cm.prototype.size());
        for (double& v : cm.prototype) {
            v -= mean;
        }
        normalize_rms(cm.prototype);
        cm.description = fmt::format("{} is a scan with a dense region in the {} of the {} slices.", label,
                                     region_name(cy, cx), cz < 0.5 ? "upper" : "lower");
        break;
    }
    case Modality::tabular: {
        const std::size_t f = sh.table_cols;
        cm.prototype.resize(f);
        for (auto& v : cm.prototype) {
            v = 0.5 * rng.normal();
        }
        const auto hi = std::max_element(cm.prototype.begin(), cm.prototype.end()) - cm.prototype.begin();
        const auto lo = std::min_element(cm.prototype.begin(), cm.prototype.end()) - cm.prototype.begin();
        cm.description =
            fmt::format("{} is a table where column f{} runs high and column f{} runs low.", label, hi, lo);
        break;
    }
    case Modality::timecourse: {
        cm.frequency = 0.5 + 2.5 * rng.uniform();
        for (std::size_t f = 0; f < sh.series_features; ++f) {
            cm.phases.push_back(2.0 * kPi * rng.uniform());
        }
        cm.description = fmt::format("{} is a series with {} oscillations across all features.", label,
                                     cm.frequency < 1.5 ? "slow" : "fast");
        break;
    }
    }
    (void)separation;
    return cm;
}

Payload make_payload(Modality m, const ShapeSpec& sh, const ClassModel& cm, double sep, Rng& rng) {
    switch (m) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb: {
        const std::size_t h = sh.image_height, w = sh.image_width;
        const std::size_t c = m == Modality::image2d_rgb ? 3 : 1;
        NdArray px{{h, w, c}, std::vector<float>(h * w * c)};
        for (std::size_t i = 0; i < h * w; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double gain = c == 3 ? cm.channel_gain[ch] : 1.0;
                px.values[i * c + ch] = clamp01(0.5 + 0.1 * sep * gain * cm.prototype[i] + kPixelNoise * rng.normal());
            }
        }
        return ImagePayload{std::move(px)};
    }
    case Modality::volume3d: {
        const std::size_t n = sh.volume_depth * sh.volume_height * sh.volume_width;
        NdArray vox{{sh.volume_depth, sh.volume_height, sh.volume_width, 1}, std::vector<float>(n)};
        for (std::size_t i = 0; i < n; ++i) {
            vox.values[i] = clamp01(0.5 + 0.1 * sep * cm.prototype[i] + kPixelNoise * rng.normal());
        }
        return VolumePayload{std::move(vox)};
    }
    case Modality::tabular: {
        const std::size_t r = sh.table_rows, f = sh.table_cols;
        TablePayload tab;
        for (std::size_t j = 0; j < f; ++j) {
            tab.columns.push_back("f" + std::to_string(j));
        }
        tab.cells = NdArray{{r, f}, std::vector<float>(r * f)};
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
                tab.cells.values[i * f + j] = static_cast<float>(sep * cm.prototype[j] + kTableNoise * rng.normal());
            }
        }
        return tab;
    }
    case Modality::timecourse: {
        const std::size_t t = sh.series_length, f = sh.series_features;
        TimecoursePayload tc;
        tc.series = NdArray{{t, f}, std::vector<float>(t * f)};
        for (std::size_t i = 0; i < t; ++i) {
            tc.timestamps.push_back(static_cast<float>(i));
            for (std::size_t j = 0; j < f; ++j) {
                const double wave = std::sin(2.0 * kPi * cm.frequency * static_cast<double>(i) /
                                                 static_cast<double>(t) +
                                             cm.phases[j]);
                tc.series.values[i * f + j] = static_cast<float>(0.3 * sep * wave + kSeriesNoise * rng.normal());
            }
        }
        return tc;
    }
    }
    fail(ErrorKind::validation, "unhandled modality");
}

}  // namespace

GeneratorSpec generator_spec_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"modalities", "classes_per_modality", "samples_per_class", "shapes", "class_separation",
                         "description_fraction", "seed"},
                        "generator spec");
    GeneratorSpec spec;
    try {
        if (j.contains("modalities")) {
            spec.modalities.clear();
            for (const auto& m : j.at("modalities")) {
                spec.modalities.push_back(parse_modality(m.get<std::string>()));
            }
        }
        spec.classes_per_modality = get_size(j, "classes_per_modality", spec.classes_per_modality);
        spec.samples_per_class = get_size(j, "samples_per_class", spec.samples_per_class);
        spec.class_separation = j.value("class_separation", spec.class_separation);
        spec.description_fraction = j.value("description_fraction", spec.description_fraction);
        spec.seed = j.value("seed", spec.seed);
        if (j.contains("shapes")) {
            const auto& s = j.at("shapes");
            reject_unknown_keys(s,
                                {"image_height", "image_width", "volume_depth", "volume_height", "volume_width",
                                 "table_rows", "table_cols", "series_length", "series_features"},
                                "generator spec shapes");
            auto& sh = spec.shapes;
            sh.image_height = get_size(s, "image_height", sh.image_height);
            sh.image_width = get_size(s, "image_width", sh.image_width);
            sh.volume_depth = get_size(s, "volume_depth", sh.volume_depth);
            sh.volume_height = get_size(s, "volume_height", sh.volume_height);
            sh.volume_width = get_size(s, "volume_width", sh.volume_width);
            sh.table_rows = get_size(s, "table_rows", sh.table_rows);
            sh.table_cols = get_size(s, "table_cols", sh.table_cols);
            sh.series_length = get_size(s, "series_length", sh.series_length);
            sh.series_features = get_size(s, "series_features", sh.series_features);
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::configuration, std::string("generator spec: ") + e.what());
    }
    return spec;
}

json to_json(const GeneratorSpec& spec) {
    json mods = json::array();
    for (auto m : spec.modalities) {
        mods.push_back(std::string(to_string(m)));
    }
    const auto& sh = spec.shapes;
    return json{{"modalities", mods},
                {"classes_per_modality", spec.classes_per_modality},
                {"samples_per_class", spec.samples_per_class},
                {"class_separation", spec.class_separation},
                {"description_fraction", spec.description_fraction},
                {"seed", spec.seed},
                {"shapes",
                 {{"image_height", sh.image_height},
                  {"image_width", sh.image_width},
                  {"volume_depth", sh.volume_depth},
                  {"volume_height", sh.volume_height},
                  {"volume_width", sh.volume_width},
                  {"table_rows", sh.table_rows},
                  {"table_cols", sh.table_cols},
                  {"series_length", sh.series_length},
                  {"series_features", sh.series_features}}}};
}

Dataset generate_synthetic(const GeneratorSpec& spec) {
    if (spec.samples_per_class < kMinPerClass || spec.samples_per_class > kMaxPerClass) {
        fail(ErrorKind::validation,
             fmt::format("samples_per_class must be in [{}, {}], got {}", kMinPerClass, kMaxPerClass,
                         spec.samples_per_class));
    }
    if (!(spec.class_separation >= 0.0)) {
        fail(ErrorKind::validation, "class_separation must be >= 0");
    }
    if (!(spec.description_fraction >= 0.0 && spec.description_fraction <= 1.0)) {
        fail(ErrorKind::validation, "description_fraction must be in [0, 1]");
    }
    if (spec.classes_per_modality == 0 || spec.modalities.empty()) {
        fail(ErrorKind::validation, "generator needs at least one modality and one class");
    }

    Rng naming(mix_seed(spec.seed, 0x6c61626c));
    std::set<std::string> taken;
    std::vector<Sample> samples;
    std::vector<std::string> descriptions;
    for (std::size_t mi = 0; mi < spec.modalities.size(); ++mi) {
        const Modality m = spec.modalities[mi];
        for (std::size_t c = 0; c < spec.classes_per_modality; ++c) {
            const std::string label = make_label(naming, taken);
            const std::uint64_t class_seed = mix_seed(mix_seed(spec.seed, mi + 1), c);
            Rng class_rng(class_seed);
            const ClassModel cm = make_class(m, spec.shapes, label, spec.class_separation, class_rng);
            for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
                Rng sample_rng(mix_seed(class_seed, k + 1));
                Sample s;
                s.id = fmt::format("{}-{:03}-{:02}", to_string(m), c, k);
                s.modality = m;
                s.class_label = label;
                s.payload = make_payload(m, spec.shapes, cm, spec.class_separation, sample_rng);
                s.meta = {{"source", "synthetic"}, {"scenario", std::string(to_string(m))}};
                samples.push_back(std::move(s));
                descriptions.push_back(cm.description);
            }
        }
    }
    Rng picker(mix_seed(spec.seed, 0x64657363));
    const auto n_desc = static_cast<std::size_t>(
        std::floor(spec.description_fraction * static_cast<double>(samples.size()) + 0.5));
    for (auto i : picker.choose(samples.size(), n_desc)) {
        samples[i].description = descriptions[i];
    }
    return Dataset(std::move(samples));
}

}  // namespace m3f::data
