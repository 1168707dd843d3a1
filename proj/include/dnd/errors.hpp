#pragma once

#include <stdexcept>
#include <string>

namespace dnd {

/// Shape or dimension mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration, spec or dataset failed validation.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation precondition (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Architecture search produced no candidate above the accuracy floor.
class SearchFailure : public std::runtime_error {
 public:
  SearchFailure(const std::string& what, double best_accuracy)
      : std::runtime_error(what), best_accuracy_(best_accuracy) {}
  double best_accuracy() const noexcept { return best_accuracy_; }

 private:
  double best_accuracy_;
};

}  // namespace dnd
