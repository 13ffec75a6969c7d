#pragma once

#include <stdexcept>
#include <string>

namespace deltafusion {

// Shape or dimension mismatch between tensors.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid configuration value (even kernel width, sequence over capacity, ...).
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Numerical failure at runtime: degenerate softmax row, non-PD covariance,
// non-finite loss.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed dataset records or invariant violations on load.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint version, checksum or stage-tag mismatch.
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace deltafusion
