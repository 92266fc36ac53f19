#include "data/records.hpp"

#include <fstream>

#include <fmt/format.h>

#include "autodiff/tensor_io.hpp"
#include "common/error.hpp"
#include "common/json_util.hpp"

namespace m3f::data {

namespace fs = std::filesystem;

namespace {

const char* payload_kind(const Payload& p) {
    switch (p.index()) {
    case 0: return "image";
    case 1: return "volume";
    case 2: return "table";
    default: return "timecourse";
    }
}

const char* expected_kind(Modality m) {
    switch (m) {
    case Modality::image2d_gray:
    case Modality::image2d_rgb: return "image";
    case Modality::volume3d: return "volume";
    case Modality::tabular: return "table";
    case Modality::timecourse: return "timecourse";
    }
    return "";
}

const NdArray& payload_array(const Payload& p) {
    return std::visit(
        [](const auto& v) -> const NdArray& {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, ImagePayload>) {
                return v.pixels;
            } else if constexpr (std::is_same_v<T, VolumePayload>) {
                return v.voxels;
            } else if constexpr (std::is_same_v<T, TablePayload>) {
                return v.cells;
            } else {
                return v.series;
            }
        },
        p);
}

struct LineContext {
    std::string file;
    std::size_t line;

    [[noreturn]] void fail_parse(const std::string& what) const {
        fail(ErrorKind::parse, fmt::format("{}:{}: {}", file, line, what));
    }
    [[noreturn]] void fail_validation(const std::string& what) const {
        fail(ErrorKind::validation, fmt::format("{}:{}: {}", file, line, what));
    }
};

Sample parse_record(const json& j, const fs::path& base, const LineContext& ctx) {
    if (!j.is_object()) {
        ctx.fail_parse("record is not an object");
    }
    for (const char* key : {"id", "modality", "class_label"}) {
        if (!j.contains(key) || !j.at(key).is_string()) {
            ctx.fail_parse(fmt::format("missing string field \"{}\"", key));
        }
    }
    Sample s;
    s.id = j.at("id").get<std::string>();
    s.class_label = j.at("class_label").get<std::string>();
    try {
        s.modality = parse_modality(j.at("modality").get<std::string>());
    } catch (const Error& e) {
        ctx.fail_validation(e.what());
    }
    try {
        if (j.contains("description") && !j.at("description").is_null()) {
            s.description = j.at("description").get<std::string>();
        }
        if (j.contains("meta")) {
            s.meta = j.at("meta").get<std::map<std::string, std::string>>();
        }
    } catch (const json::exception& e) {
        ctx.fail_parse(e.what());
    }

    const bool has_path = j.contains("payload_path");
    const bool has_table = j.contains("table");
    if (has_path == has_table) {
        ctx.fail_parse("record needs exactly one of \"payload_path\" or inline \"table\"");
    }
    if (has_table) {
        if (s.modality != Modality::tabular) {
            ctx.fail_validation(fmt::format("modality {} cannot carry an inline table", to_string(s.modality)));
        }
        TablePayload tab;
        try {
            const auto& t = j.at("table");
            tab.columns = t.at("columns").get<std::vector<std::string>>();
            const auto rows = t.at("rows").get<std::vector<std::vector<float>>>();
            tab.cells.shape = {rows.size(), tab.columns.size()};
            for (const auto& row : rows) {
                if (row.size() != tab.columns.size()) {
                    ctx.fail_validation(
                        fmt::format("inline table row has {} cells for {} columns", row.size(), tab.columns.size()));
                }
                tab.cells.values.insert(tab.cells.values.end(), row.begin(), row.end());
            }
        } catch (const json::exception& e) {
            ctx.fail_parse(e.what());
        }
        s.payload = std::move(tab);
        return s;
    }

    const std::string want = expected_kind(s.modality);
    if (j.contains("payload_kind") && j.at("payload_kind") != want) {
        ctx.fail_validation(fmt::format("modality {} does not accept a {} payload", to_string(s.modality),
                                        j.at("payload_kind").dump()));
    }
    ad::RawTensor raw = ad::read_tensor_file(base / j.at("payload_path").get<std::string>());
    NdArray arr{std::move(raw.shape), std::move(raw.values)};
    try {
        switch (s.modality) {
        case Modality::image2d_gray:
        case Modality::image2d_rgb: s.payload = ImagePayload{std::move(arr)}; break;
        case Modality::volume3d: s.payload = VolumePayload{std::move(arr)}; break;
        case Modality::tabular:
            s.payload = TablePayload{j.at("columns").get<std::vector<std::string>>(), std::move(arr)};
            break;
        case Modality::timecourse:
            s.payload = TimecoursePayload{j.at("timestamps").get<std::vector<float>>(), std::move(arr)};
            break;
        }
    } catch (const json::exception& e) {
        ctx.fail_parse(e.what());
    }
    try {
        validate_sample(s);
    } catch (const Error& e) {
        ctx.fail_validation(e.what());
    }
    return s;
}

}  // namespace

void write_records(const Dataset& ds, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "payloads", ec);
    if (ec) {
        fail(ErrorKind::io, fmt::format("cannot create {}: {}", (dir / "payloads").string(), ec.message()));
    }
    std::ofstream out(dir / kRecordsFile, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot write " + (dir / kRecordsFile).string());
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Sample& s = ds.sample(i);
        const std::string rel = fmt::format("payloads/{:06}.m3ft", i);
        const NdArray& arr = payload_array(s.payload);
        ad::write_tensor_file(dir / rel, arr.shape, arr.values);

        ordered_json rec;
        rec["id"] = s.id;
        rec["modality"] = std::string(to_string(s.modality));
        rec["class_label"] = s.class_label;
        if (s.description) {
            rec["description"] = *s.description;
        }
        rec["payload_kind"] = payload_kind(s.payload);
        rec["payload_path"] = rel;
        if (const auto* tab = std::get_if<TablePayload>(&s.payload)) {
            rec["columns"] = tab->columns;
        }
        if (const auto* tc = std::get_if<TimecoursePayload>(&s.payload)) {
            rec["timestamps"] = tc->timestamps;
        }
        rec["meta"] = s.meta;
        out << rec.dump() << '\n';
    }
    if (!out) {
        fail(ErrorKind::io, "write failed for " + (dir / kRecordsFile).string());
    }
}

LoadedRecords read_records(const fs::path& path) {
    const fs::path file = fs::is_directory(path) ? path / kRecordsFile : path;
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open " + file.string());
    }
    const fs::path base = file.parent_path();
    std::vector<Sample> samples;
    std::string line;
    LineContext ctx{file.string(), 0};
    while (std::getline(in, line)) {
        ++ctx.line;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            ctx.fail_parse(fmt::format("malformed record: {}", e.what()));
        }
        samples.push_back(parse_record(j, base, ctx));
    }
    LoadedRecords out;
    out.dataset = Dataset(std::move(samples));
    out.warnings = out.dataset.class_size_warnings();
    return out;
}

}  // namespace m3f::data
