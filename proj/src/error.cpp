#include "forgetdissect/error.hpp"

namespace forgetdissect {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Config: return "config";
        case ErrorKind::Input: return "input";
        case ErrorKind::Parameter: return "parameter";
        case ErrorKind::Target: return "target";
        case ErrorKind::Format: return "format";
        case ErrorKind::Model: return "model";
        case ErrorKind::Io: return "io";
    }
    return "unknown";
}

int exit_code(ErrorKind kind) noexcept { return 3 + static_cast<int>(kind); }

bool kind_from_exit_code(int code, ErrorKind& kind) noexcept {
    if (code < 3 || code > 3 + static_cast<int>(ErrorKind::Io)) return false;
    kind = static_cast<ErrorKind>(code - 3);
    return true;
}

}  // namespace forgetdissect
