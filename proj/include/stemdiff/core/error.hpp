#pragma once

#include <stdexcept>
#include <string>

namespace stemdiff {

/// Base of every error the library raises. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

/// Raised when a checkpoint or artifact does not match the requested configuration.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class StatisticsError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training; carries the optimizer step at which it happened.
class TrainingDivergence : public NumericError {
 public:
  TrainingDivergence(const std::string& what, long step) : NumericError(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace stemdiff
