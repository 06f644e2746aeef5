#pragma once

#include <stdexcept>
#include <string>

namespace phenoflow {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not match what an operation requires.
struct ShapeError : Error {
    using Error::Error;
};

/// A forward op produced NaN/Inf, or inputs were non-finite.
struct NumericError : Error {
    using Error::Error;
};

/// API used out of order (e.g. backward twice without reset).
struct StateError : Error {
    using Error::Error;
};

/// A precondition on arguments was violated.
struct ContractError : Error {
    using Error::Error;
};

/// Argument outside its mathematical domain (e.g. t outside [0,1]).
struct DomainError : Error {
    using Error::Error;
};

/// Problem with user-supplied data (missing context, leaked holdout id, ...).
struct DataError : Error {
    using Error::Error;
};

/// Malformed file contents. `offset` is the byte position when known.
struct FormatError : Error {
    explicit FormatError(const std::string& msg, long long offset = -1)
        : Error(offset >= 0 ? msg + " (byte offset " + std::to_string(offset) + ")" : msg),
          offset(offset) {}
    long long offset = -1;
};

/// Invalid run configuration; message lists the offending keys.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace phenoflow
