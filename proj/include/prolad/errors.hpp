#pragma once

#include <stdexcept>
#include <string>

namespace prolad {

// Base class for everything thrown by this library. Subclasses carry the
// category () so callers (and the CLI) can map an error to an exit line
// without string matching.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* category() const noexcept { return "error"; }
};

// Dimension/shape disagreement between tensors.
class ShapeError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "shape"; }
};

// Invalid configuration value (widths, groups, grids, missing checkpoint...).
class ConfigError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "config"; }
};

// Invalid runtime input (labels out of range, unbalanced weights...).
class InputError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "input"; }
};

// An API contract was violated (non-scalar loss, mismatched optimizer state).
class ContractError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "contract"; }
};

// Training-time failure (divergence, degenerate batch statistics).
class TrainingError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "training"; }
};

// Filesystem / serialization failure.
class IoError : public Error {
public:
  using Error::Error;
  const char* category() const noexcept override { return "io"; }
};

}  // namespace prolad
