#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vlink {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad caller-supplied arguments or configuration (maps to CLI exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a format or invariant (maps to CLI exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A DataError anchored to a 1-based line of a line-delimited input.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Numerical failure during optimization (non-finite loss and the like).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace vlink
