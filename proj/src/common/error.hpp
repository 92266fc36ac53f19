#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace m3f {

enum class ErrorKind {
    dimension,
    validation,
    parse,
    usage,
    configuration,
    episode,
    template_error,
    length,
    training,
    io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace m3f
