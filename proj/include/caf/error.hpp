#pragma once

#include <stdexcept>
#include <string>

namespace caf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or point dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A serialized payload (checkpoint, coupling file) is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, or too many dropped samples.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-facing configuration or argument.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace caf
