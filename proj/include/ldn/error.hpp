#pragma once

#include <stdexcept>

namespace ldn {

// Operand dimensions do not line up; the message names both shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad caller-supplied data: out-of-range token ids or labels, non-finite
// inputs, violated operation contracts.
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration (unknown keys, bad field values).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed checkpoint file or incompatible tensor set.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss; what() carries a diagnostic dump.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace ldn
