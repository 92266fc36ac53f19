#pragma once

#include <functional>
#include <string>

#include "common/error.hpp"

namespace m3f::testing {

inline bool throws_kind(const std::function<void()>& fn, ErrorKind kind) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind() == kind;
    }
    return false;
}

// Message of the m3f::Error thrown by fn, or "" when nothing is thrown.
inline std::string error_message(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

}  // namespace m3f::testing
