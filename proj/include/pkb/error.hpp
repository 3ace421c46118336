#pragma once

#include <stdexcept>
#include <string>

namespace pkb {

// Error families; the CLI maps each one to its own exit code.
enum class ErrorKind {
    parse,
    dimension,
    precondition,
    numeric,
    invariant,
    version,
    io,
    threshold,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

const char* to_string(ErrorKind kind) noexcept;

// Process exit status for an error family. 0 is reserved for success.
int exit_code(ErrorKind kind) noexcept;

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

}  // namespace pkb
