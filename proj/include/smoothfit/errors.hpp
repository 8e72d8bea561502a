#pragma once

#include <stdexcept>
#include <string>

namespace smoothfit {

// Bad input: malformed spec, unknown column, inconsistent dimensions.
struct SpecError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Covariate value outside the range a basis was built on.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical breakdown (singular block, factor invalid, cap reached).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Cholesky hit a non-positive pivot. `pivot` is the index in the permuted order.
struct IndefiniteError : NumericError {
  int pivot;
  IndefiniteError(int k, const std::string& msg) : NumericError(msg), pivot(k) {}
};

}  // namespace smoothfit
