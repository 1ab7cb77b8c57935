#pragma once

#include <stdexcept>
#include <string>

namespace polydet {

// Error categories map onto the process exit codes (usage=1, numeric=2,
// io=3) at the C API boundary.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ShapeError : UsageError {
  using UsageError::UsageError;
};

}  // namespace polydet
