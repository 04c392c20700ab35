#pragma once

#include <stdexcept>
#include <string>

namespace calora {

/// A precondition of an operation was violated by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operand shapes do not conform to the primitive's contract.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// A numerical computation produced a result the caller cannot use
/// (diverged training, degenerate gradients).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An internal invariant was broken; indicates a bug, not bad input.
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace calora
