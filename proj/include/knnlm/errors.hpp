#pragma once

#include <stdexcept>
#include <string>

namespace knnlm {

/// Invalid configuration or violated precondition supplied by the caller.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values where finite math was required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

enum class IoCode {
    open_failed,
    read_failed,
    write_failed,
    bad_magic,
    bad_version,
    truncated,
    bad_layout,
    checksum_mismatch,
};

/// File-format and filesystem failures; `code` distinguishes the cause.
struct IoError : std::runtime_error {
    IoCode code;
    IoError(IoCode c, const std::string& what) : std::runtime_error(what), code(c) {}
};

}  // namespace knnlm
