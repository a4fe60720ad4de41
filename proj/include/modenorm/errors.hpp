#pragma once

#include <stdexcept>

namespace modenorm {

// Raised when a computation produced (or would consume) non-finite values:
// exploding loss, NaN gradients, failed gradient certification. The CLI maps
// this family to exit code 2; plain validation errors map to exit code 1.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace modenorm
