#pragma once

#include <stdexcept>
#include <string>

namespace wgqed {

/// Base of every error raised by the library. The category decides the CLI
/// exit status.
class Error : public std::runtime_error {
 public:
  enum class Category { validation, convergence, io };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

/// Precondition or physical-invariant violation.
struct DomainError : Error {
  explicit DomainError(const std::string& what) : Error(Category::validation, what) {}
};

/// Malformed configuration or data file. `where` names the key path or line.
struct ParseError : Error {
  ParseError(const std::string& where, const std::string& what)
      : Error(Category::validation, where + ": " + what), location(where) {}
  std::string location;
};

/// A required input is missing (e.g. a fit result for the comparison table).
struct StructuralError : Error {
  explicit StructuralError(const std::string& what) : Error(Category::validation, what) {}
};

/// Data carry no usable feature (no dip, no oscillation, no decay).
struct SignalError : Error {
  explicit SignalError(const std::string& what) : Error(Category::convergence, what) {}
};

struct ConvergenceError : Error {
  explicit ConvergenceError(const std::string& what) : Error(Category::convergence, what) {}
};

/// Rank-deficient normal equations.
struct ConditioningError : Error {
  explicit ConditioningError(const std::string& what) : Error(Category::convergence, what) {}
};

/// A trajectory left the set of physical density matrices.
struct IntegrationError : Error {
  explicit IntegrationError(const std::string& what) : Error(Category::convergence, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(Category::io, what) {}
};

}  // namespace wgqed
