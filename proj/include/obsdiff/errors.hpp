#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace obsdiff {

enum class ErrorCode {
    // container codec
    DuplicateName,
    BadShape,
    NotAContainer,
    Truncated,
    UnknownDtype,
    BadMetadata,
    // model / pipeline configuration
    BadConfig,
    BadStep,
    UnknownLayer,
    // numerics
    ShapeMismatch,
    NotFinalized,
    NotPositiveDefinite,
    BadSpec,
    // filesystem
    IoError,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code),
          message_(message) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& message() const noexcept { return message_; }

private:
    ErrorCode code_;
    std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        fail(code, message);
    }
}

} // namespace obsdiff
