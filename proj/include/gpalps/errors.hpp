#pragma once

#include <stdexcept>
#include <string>

namespace gpalps {

// Matrix failed to factor even at the jitter cap.
struct NotPositiveDefinite : std::runtime_error {
  explicit NotPositiveDefinite(const std::string& what) : std::runtime_error(what) {}
};

// Overflow / non-finite values inside a numeric routine.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// Bad kernel hyperparameters.
struct InvalidKernel : std::invalid_argument {
  explicit InvalidKernel(const std::string& what) : std::invalid_argument(what) {}
};

// Bad run configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// File / parse problems (CLI exit code 3).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gpalps
