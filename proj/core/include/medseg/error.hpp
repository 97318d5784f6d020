#pragma once

#include <stdexcept>
#include <string>

namespace medseg {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor, volume or mask shapes that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A file was readable but its contents are malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a precondition (non-finite values, empty sets, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure failed (rank deficiency, degenerate samples).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(int epoch, const std::string& what)
      : NumericalError(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace medseg
