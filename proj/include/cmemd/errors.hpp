#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cmemd {

// Bad shapes, out-of-range labels, invalid configuration values.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation was called on an object that lacks required state.
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Exact solvers refuse instances beyond their size guard.
class UnsupportedSize : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Non-finite values or degenerate statistics met during computation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateBatch : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Text input that does not conform to its format. Carries the 1-based line.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& detail)
      : std::runtime_error("line " + std::to_string(line) + ": " + detail), line_(line), detail_(detail) {}
  // Message becomes "<source>:<line>: <detail>".
  ParseError(const std::string& source, std::size_t line, const std::string& detail)
      : std::runtime_error(source + ":" + std::to_string(line) + ": " + detail), line_(line), detail_(detail) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

}  // namespace cmemd
