#pragma once

#include <stdexcept>
#include <string>

namespace bf {

// Shape/dimension mismatch between tensors.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (odd split dim, p >= 1, d % h != 0, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call contract (non-scalar loss, non-normalized attention row, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint / file I/O failures, with a machine-checkable kind.
struct CheckpointError : std::runtime_error {
  enum class Kind { IoFailure, BadHeader, VersionMismatch, Truncated, ShapeMismatch };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

}  // namespace bf
