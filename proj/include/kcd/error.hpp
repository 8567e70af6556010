#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kcd {

enum class ErrorKind {
    shape,
    domain,
    contract,
    config,
    parse,
    integrity,
    lookup,
    metric,
    numeric,
    io,
    checkpoint,
    capability,
};

constexpr std::string_view error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::domain: return "domain";
        case ErrorKind::contract: return "contract";
        case ErrorKind::config: return "config";
        case ErrorKind::parse: return "parse";
        case ErrorKind::integrity: return "integrity";
        case ErrorKind::lookup: return "lookup";
        case ErrorKind::metric: return "metric";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::io: return "io";
        case ErrorKind::checkpoint: return "checkpoint";
        case ErrorKind::capability: return "capability";
    }
    return "unknown";
}

/// Every failure raised by the library carries a kind, which the CLI maps to
/// its `error[<kind>]:` prefix.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace kcd
