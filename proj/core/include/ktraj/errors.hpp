#pragma once

#include <stdexcept>
#include <string>

namespace ktraj {

// Base class for all library errors so callers can catch a single type.
struct error : std::runtime_error {
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition violation on an in-memory argument (shape, range, divisibility).
struct argument_error : error {
  using error::error;
};

// File read/write or format failure.
struct io_error : error {
  using error::error;
};

// Bad configuration document or unknown configuration key.
struct config_error : error {
  using error::error;
};

// Adaptive integration failed (step exhaustion, non-finite derivative).
struct integration_error : error {
  using error::error;
};

// Statistical test whose result is undefined for the given input.
struct undefined_test_error : error {
  using error::error;
};

}  // namespace ktraj
