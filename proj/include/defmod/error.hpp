// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace defmod {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
  using Error::Error;
};
class DegenerateMaskError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};
class IndexError : public Error {
  using Error::Error;
};
class LengthError : public Error {
  using Error::Error;
};
class MarkingError : public Error {
  using Error::Error;
};
class NumericError : public Error {
  using Error::Error;
};
class FormatVersionError : public Error {
  using Error::Error;
};
class IoError : public Error {
  using Error::Error;
};

// Input data problems. The CLI maps this family to exit code 3.
class DataError : public Error {
  using Error::Error;
};
class ParseError : public DataError {
  using DataError::DataError;
};
class SchemaError : public DataError {
  using DataError::DataError;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename E, typename... Args>
[[noreturn]] void raise(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

}  // namespace defmod
