#pragma once

#include <stdexcept>
#include <string>

namespace forgetdissect {

/// Failure categories. The CLI maps each to a distinct exit code.
enum class ErrorKind {
    Config,     // invalid configuration value or combination
    Input,      // malformed or mismatched input data
    Parameter,  // out-of-range call parameter
    Target,     // unknown PDA target
    Format,     // unreadable/corrupt file, wrong magic or schema version
    Model,      // incompatible models
    Io,         // filesystem failure or missing file
};

const char* to_string(ErrorKind kind) noexcept;

/// Process exit code for a failure kind (3..9); 1 is reserved for
/// unexpected failures and 2 for usage errors.
int exit_code(ErrorKind kind) noexcept;
/// Inverse of exit_code; false when `code` is not one of its values.
bool kind_from_exit_code(int code, ErrorKind& kind) noexcept;

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
    if (!condition) throw Error(kind, message);
}

}  // namespace forgetdissect
