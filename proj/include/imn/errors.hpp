#pragma once

#include <stdexcept>
#include <string>

namespace imn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A computed value is NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a precondition (wrong node kind, click fed to the purchase branch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed interaction CSV, metadata sidecar or config file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Problems with the input log itself (too short to split, empty validation range).
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace imn
