#pragma once

#include <stdexcept>
#include <string>

namespace ttd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a documented precondition (bad label, empty text, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// API misuse: calling an operation outside its contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A tabular input lacks a required column.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// A file could not be read or failed integrity checks.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss or weights).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace ttd
