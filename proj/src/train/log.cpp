#include "train/log.hpp"

#include <cmath>

#include "common/error.hpp"

namespace m3f::train {

TrainLog::TrainLog(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    out_.emplace(path, std::ios::app);
    if (!*out_) {
        fail(ErrorKind::io, "cannot open log " + path.string());
    }
}

void TrainLog::write(ordered_json record) {
    if (record.contains("loss")) {
        const auto& l = record["loss"];
        if (!l.is_number() || !std::isfinite(l.get<double>())) {
            fail(ErrorKind::training, "refusing to log a non-finite loss: " + record.dump());
        }
    }
    if (out_) {
        *out_ << record.dump() << '\n';
        out_->flush();
    }
    records_.push_back(std::move(record));
}

}  // namespace m3f::train
