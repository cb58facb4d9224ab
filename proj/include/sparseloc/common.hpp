#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sparseloc {

/// Bad user input: CLI usage, config values, invariant violations detected
/// before any compute starts. Mapped to exit code 2 by the CLI.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or corrupt input data (truncated scan file, non-finite record,
/// unparsable CSV). Also mapped to exit code 2: the inputs are wrong.
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dimension or coordinate-range mismatch between tensors, layers or
/// checkpoints.
struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// API misuse (e.g. backward before forward).
struct usage_error : std::logic_error {
  using std::logic_error::logic_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw config_error(msg);
}

}  // namespace sparseloc
