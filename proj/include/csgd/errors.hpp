#pragma once

#include <stdexcept>
#include <string>

namespace csgd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A spec, config or argument failed validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A pruning plan would break a residual add or a dense BN slice.
class ConstraintError : public Error {
 public:
  using Error::Error;
};

/// File format or filesystem problem.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Trimmed model does not reproduce the original outputs.
class EquivalenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace csgd
