#pragma once

#include <stdexcept>
#include <string>

namespace embedkit {

// Bad configuration or parameter values. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatches between tensors or between data and a model.
struct DimensionError : ConfigError {
  using ConfigError::ConfigError;
};

// Malformed or invalid input data. CLI maps this to exit code 3.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf detected in a computation. CLI maps this to exit code 4.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: calling things in an order the contract forbids.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace embedkit
