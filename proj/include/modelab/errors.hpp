#pragma once

#include <stdexcept>
#include <string>

namespace modelab {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad shapes, invalid layer wiring, out-of-range labels.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf detected in a computation, or a degenerate matrix.
struct NumericError : Error {
  using Error::Error;
};

// Malformed config file or CLI usage.
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem and parse failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace modelab
