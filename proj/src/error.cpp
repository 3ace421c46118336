#include "pkb/error.hpp"

namespace pkb {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::parse: return "parse error";
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::precondition: return "precondition error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::invariant: return "invariant error";
    case ErrorKind::version: return "version error";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::threshold: return "threshold failure";
    }
    return "error";
}

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::parse: return 2;
    case ErrorKind::dimension: return 3;
    case ErrorKind::precondition: return 4;
    case ErrorKind::numeric: return 5;
    case ErrorKind::invariant: return 6;
    case ErrorKind::version: return 7;
    case ErrorKind::io: return 8;
    case ErrorKind::threshold: return 9;
    }
    return 1;
}

}  // namespace pkb
