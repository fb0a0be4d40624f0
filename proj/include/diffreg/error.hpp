#pragma once

#include <stdexcept>
#include <string>

namespace diffreg {

/// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
    config,     ///< invalid configuration or flag combination
    parse,      ///< malformed input file
    input,      ///< bad argument to an operation (dimension mismatch, unknown name)
    retrieval,  ///< no reference candidates could be found
    fit,        ///< a model could not be fitted
    numeric,    ///< NaN/Inf or failed numerical check
    load,       ///< malformed or incompatible checkpoint
    evaluation  ///< evaluation over empty/inconsistent input
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::parse: return "parse";
        case ErrorKind::input: return "input";
        case ErrorKind::retrieval: return "retrieval";
        case ErrorKind::fit: return "fit";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::load: return "load";
        case ErrorKind::evaluation: return "evaluation";
    }
    return "unknown";
}

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

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) {
        fail(kind, message);
    }
}

} // namespace diffreg
