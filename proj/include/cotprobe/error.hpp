#pragma once

#include <stdexcept>
#include <string>

namespace cotprobe {

// All harness failures derive from Error so callers can catch one type and
// still branch on the category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed something that violates a precondition (arity, bijection...).
class ArgumentError : public Error {
  using Error::Error;
};

// Malformed input line; message carries the 1-based line number.
class ParseError : public Error {
  using Error::Error;
};

// Well-formed record whose content is inconsistent (counts, labels).
class ValidationError : public Error {
  using Error::Error;
};

// Record missing fields the task kind requires.
class SchemaError : public Error {
  using Error::Error;
};

class ConstructionError : public Error {
  using Error::Error;
};

class DegenerateInputError : public Error {
  using Error::Error;
};

class DomainError : public Error {
  using Error::Error;
};

class NumericError : public Error {
  using Error::Error;
};

// Network, timeout, or retryable HTTP status. The only retryable category.
class TransportError : public Error {
  using Error::Error;
};

class ProtocolError : public Error {
  using Error::Error;
};

// No alias of some option appeared among the first-position candidates.
class CoverageError : public Error {
 public:
  CoverageError(const std::string& option, const std::string& what)
      : Error(what), option_(option) {}
  const std::string& option() const noexcept { return option_; }

 private:
  std::string option_;
};

class PlanError : public Error {
  using Error::Error;
};

class AggregationError : public Error {
  using Error::Error;
};

class IncompleteTableError : public Error {
  using Error::Error;
};

class DegeneracyError : public Error {
  using Error::Error;
};

class ReportError : public Error {
  using Error::Error;
};

class ConfigError : public Error {
  using Error::Error;
};

}  // namespace cotprobe
