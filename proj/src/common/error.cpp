#include "common/error.hpp"

namespace m3f {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::usage: return "usage error";
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::episode: return "episode error";
    case ErrorKind::template_error: return "template error";
    case ErrorKind::length: return "length error";
    case ErrorKind::training: return "training error";
    case ErrorKind::io: return "io error";
    }
    return "error";
}

void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, std::string(to_string(kind)) + ": " + message);
}

}  // namespace m3f
