#pragma once

#include <stdexcept>
#include <string>

namespace lbt {

/// Problem data violates a standing assumption (e.g. a nonpositive
/// coercivity weight or a non-SPD local mass block).
class InvalidDataError : public std::runtime_error {
 public:
  explicit InvalidDataError(const std::string& what) : std::runtime_error(what) {}
};

/// A factorisation or local solve broke down; carries the offending element.
class NumericalBreakdownError : public std::runtime_error {
 public:
  NumericalBreakdownError(const std::string& what, long element_id)
      : std::runtime_error(what + " (element " + std::to_string(element_id) + ")"),
        element(element_id) {}
  long element;
};

/// Operation not defined for the given model (e.g. kernel moments of a
/// poly-energetic model, relaxed iteration on a poly-energetic system).
class UnsupportedOperationError : public std::logic_error {
 public:
  explicit UnsupportedOperationError(const std::string& what) : std::logic_error(what) {}
};

/// Point lies outside the space-angle-energy domain.
class OutOfDomainError : public std::domain_error {
 public:
  explicit OutOfDomainError(const std::string& what) : std::domain_error(what) {}
};

}  // namespace lbt
