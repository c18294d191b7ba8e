#pragma once

// Exception hierarchy. Everything derived from InputError is a caller/data
// problem (the CLI maps it to exit code 2); the rest are internal failures.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ctxadjust {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

// Header of a tabular input does not match the documented layout.
class SchemaError : public InputError {
 public:
  using InputError::InputError;
};

// A single data row failed validation.
class RowError : public InputError {
 public:
  RowError(std::size_t line, const std::string& message)
      : InputError("line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DomainError : public InputError {
 public:
  using InputError::InputError;
};

class PreconditionError : public InputError {
 public:
  using InputError::InputError;
};

// A model term cannot be constructed from the supplied covariate.
class TermError : public InputError {
 public:
  using InputError::InputError;
};

// Goal events disagree with a reported final score and similar data clashes.
class ConsistencyError : public InputError {
 public:
  using InputError::InputError;
};

class FitError : public Error {
 public:
  FitError(const std::string& message, std::vector<double> trace = {})
      : Error(message), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

}  // namespace ctxadjust
