#pragma once

#include <stdexcept>
#include <string>

namespace kr {

// Every failure the library reports derives from Error so callers (the CLI in
// particular) can separate library diagnostics from unexpected exceptions.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: bad arguments, wrong call order, missing gradients.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Numerically invalid input data, e.g. unnormalized probability rows.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PlanningError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// A gradient landed on parameters that the current stage must not touch.
class IsolationError : public Error {
 public:
  using Error::Error;
};

}  // namespace kr
