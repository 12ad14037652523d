#pragma once

#include <stdexcept>
#include <string>

namespace retrostory {

// Tensor or grid dimensions disagree with the configuration.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Unknown key, bad value or violated invariant in a configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Unreadable, corrupted, mismatched or wrong-version checkpoint archive.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset or request content that fails validation.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf showed up where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace retrostory
