#pragma once

#include <stdexcept>
#include <string>

namespace aquakv {

enum class ErrorKind {
    config,        // invalid parameters or unsupported preset
    shape,         // dimension mismatch between operands
    format,        // malformed, truncated or tampered file payload
    io,            // file could not be opened, read or written
    singular,      // normal equations not solvable
    incompatible,  // artifacts built for a different geometry / mode
    contract,      // API used out of order
    degenerate,    // metric undefined for the given data
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) {
        fail(kind, what);
    }
}

}  // namespace aquakv
