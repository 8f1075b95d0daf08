#pragma once

#include <stdexcept>

namespace contseg {

// Error taxonomy shared across the library. The CLI maps each class to a
// documented exit code (see tools/main.cpp and README).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mismatched tensor extents, ranks or channel counts.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration values (model depth, dataset specs, option files).
struct ConfigError : Error {
  using Error::Error;
};

// API preconditions violated by the caller (non-scalar loss, empty inputs).
struct ContractError : Error {
  using Error::Error;
};

// Operation invoked in the wrong order (backward before forward).
struct StateError : Error {
  using Error::Error;
};

// Values outside their documented numeric domain (e.g. masks outside [0,1]).
struct DomainError : Error {
  using Error::Error;
};

// Failures during optimization (non-finite gradients), with provenance.
struct TrainingError : Error {
  using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
  using Error::Error;
};

// Bad command-line usage (unknown subcommand, unknown regime name).
struct UsageError : Error {
  using Error::Error;
};

}  // namespace contseg
