#pragma once

#include <stdexcept>
#include <string>

namespace eegssm {

// Bad configuration or invalid arguments supplied by a caller.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing, corrupt, or insufficient data.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values encountered during a computation.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand extents that do not satisfy an operation's contract.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace eegssm
