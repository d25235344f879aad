#pragma once

#include <stdexcept>
#include <string>

namespace ltwin {

enum class ErrorKind {
    dimension,               // shape / extent mismatch
    validation,              // invariant violated on a domain object
    io,                      // file read/write failure or malformed container
    numeric,                 // non-finite values, failed factorization
    not_positive_definite,   // Cholesky pivot <= 0
    degenerate_spectrum,     // Hill denominator zero / flat tail
    insufficient_data,       // corpus or spectrum too small for the request
    mode,                    // operation incompatible with checkpoint mode
    usage,                   // bad CLI arguments
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string & msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string & msg) {
    throw Error(kind, msg);
}

} // namespace ltwin
