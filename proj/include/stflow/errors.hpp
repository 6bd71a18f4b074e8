#pragma once

#include <stdexcept>
#include <string>

namespace stflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Out-of-domain arguments or non-finite values produced by a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated binary files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or unknown configuration keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the differentiation engine (double backward, non-scalar loss).
class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace stflow
