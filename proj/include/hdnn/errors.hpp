#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hdnn {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (e.g. log of 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent architecture / training configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A scalar parameter (temperature, rate, ...) is out of range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Objects that must belong together do not (trace vs params, frame counts).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

/// Malformed lattice or path.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Work would exceed a fixed size guard.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset (or line) of the problem.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace hdnn
