#pragma once

#include <stdexcept>
#include <string>

namespace bnadapt {

// Exception hierarchy. The CLI maps these onto its exit codes
// (ConfigError -> 2, ToleranceError -> 3, IncompatibleError -> 4).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IncompatibleError : Error {
  using Error::Error;
};

struct ToleranceError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace bnadapt
