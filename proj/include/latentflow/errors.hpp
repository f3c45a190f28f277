#pragma once

#include <stdexcept>
#include <string>

namespace latentflow {

// Error taxonomy shared across the library. The CLI maps these onto its
// stable exit codes: validation -> 1, divergence/numeric -> 2, IO -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Non-finite intermediates, failed numeric preconditions.
struct NumericError : Error {
  using Error::Error;
};

// Training loss became non-finite or blew past the divergence guard.
struct DivergenceError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// File exists but its contents are malformed (bad magic, checksum, version).
struct FormatError : IoError {
  using IoError::IoError;
};

}  // namespace latentflow
