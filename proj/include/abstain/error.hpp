#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace abstain {

// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/label shapes disagree; `axis` names the offending extent.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& op, const std::string& axis, std::size_t expected, std::size_t actual)
      : Error(op + ": dimension mismatch on axis '" + axis + "' (expected " + std::to_string(expected) +
              ", got " + std::to_string(actual) + ")"),
        axis_(axis) {}
  explicit DimensionError(const std::string& msg, std::string axis = {}) : Error(msg), axis_(std::move(axis)) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

// Input outside an operation's mathematical domain (log of a non-positive value, ...).
class DomainError : public Error {
 public:
  DomainError(const std::string& op, std::size_t index, double value)
      : Error(op + ": value " + std::to_string(value) + " outside domain at index " + std::to_string(index)),
        index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Sequential state machine driven out of order.
class StateError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// Noise calibration cannot reach the requested corruption rate.
class CalibrationError : public Error {
 public:
  CalibrationError(double target, double lo, double hi)
      : Error("target eta " + std::to_string(target) + " unreachable; achievable range [" + std::to_string(lo) +
              ", " + std::to_string(hi) + "]"),
        target_(target),
        lo_(lo),
        hi_(hi) {}

  double target() const noexcept { return target_; }
  double achievable_min() const noexcept { return lo_; }
  double achievable_max() const noexcept { return hi_; }

 private:
  double target_, lo_, hi_;
};

// Malformed file on disk; carries the path.
class FormatError : public Error {
 public:
  FormatError(const std::string& path, const std::string& what) : Error(path + ": " + what), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// A non-finite value surfaced where finite numerics are required.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t index) : Error(what + " (index " + std::to_string(index) + ")"), index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

}  // namespace abstain
