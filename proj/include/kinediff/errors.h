#pragma once

#include <stdexcept>
#include <string>

namespace kinediff {

/// Base class for every error raised by the library. The CLI maps the
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or combination (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data could not be read or validated (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. `offset` is the byte position where parsing failed.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept {
    return offset_;
  }

 private:
  std::size_t offset_;
};

/// Input violates a geometric constraint, e.g. a non-unit bone direction.
class ValidationError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite values appeared during computation (exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

} // namespace kinediff
