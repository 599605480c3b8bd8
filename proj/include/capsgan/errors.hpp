#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace capsgan {

// Shape or op-precondition violation while building a graph.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid run configuration (bad value, unknown key, budget overflow).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed input data file (bad magic, truncation, out-of-range field).
struct DataFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure (cannot open, cannot write).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointFormatError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct CheckpointVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct CheckpointChecksumError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct CheckpointTruncatedError : CheckpointError {
  using CheckpointError::CheckpointError;
};

struct CheckpointVariantError : CheckpointError {
  using CheckpointError::CheckpointError;
};

// Non-finite loss during adversarial training; names the failing step.
struct TrainingDivergedError : std::runtime_error {
  TrainingDivergedError(std::size_t step_index, const std::string& what)
      : std::runtime_error(what), step(step_index) {}
  std::size_t step;
};

// A battle accuracy in a ratio denominator came out exactly zero.
struct DegenerateBattleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Class-stratified sampling could not cover every class.
struct StratificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace capsgan
