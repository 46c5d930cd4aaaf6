#pragma once

#include <stdexcept>
#include <string>

namespace tensor_ties {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad inputs detected before any tensor math runs: malformed archives,
/// schema mismatches, out-of-range configuration. The CLI maps these to exit 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Archive that does not follow the on-disk layout.
class FormatError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Failures during or after the numeric work (overflow on narrowing,
/// non-finite results, unwritable outputs). The CLI maps these to exit 1.
class ComputeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace tensor_ties
