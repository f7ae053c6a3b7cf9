#pragma once

#include <stdexcept>
#include <string>

namespace cpcvar {

// Error taxonomy mirrors the CLI exit codes: config 2, numeric 3, state 4.
// Shape errors are programming/contract faults and map to numeric faults
// when they escape to the CLI boundary.

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cpcvar
