#pragma once

#include <stdexcept>
#include <string>

namespace nr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or record shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or unknown config keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by an op, or a degenerate value such as a zero-norm vector.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Precondition violated on otherwise well-typed input (empty lists, bad ranks, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace nr
