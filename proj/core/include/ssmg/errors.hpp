#pragma once

#include <stdexcept>
#include <string>

namespace ssmg {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input document violates the layout JSON schema (missing/extra/mistyped field).
struct SchemaError : Error {
    using Error::Error;
};

// Structurally valid input with a semantically invalid value (inverted box,
// empty mask, non-positive radius, ...).
struct ValueError : Error {
    using Error::Error;
};

// A region rasterized to zero pixels at the requested resolution.
struct EmptyCoverage : Error {
    using Error::Error;
};

// Downsample target is not an integer divisor of the source shape.
struct DimensionError : Error {
    using Error::Error;
};

// Tensor arguments have inconsistent shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Scalar argument out of its documented range (timestep, step count, ...).
struct RangeError : Error {
    using Error::Error;
};

// Scene generation could not satisfy its constraints within the retry bound.
struct RetryExhausted : Error {
    using Error::Error;
};

// Filesystem-level failure (unreadable file, unwritable directory, bad magic).
struct IoError : Error {
    using Error::Error;
};

// Training loss became non-finite.
struct NaNLoss : Error {
    using Error::Error;
};

// Checkpoint/config disagree with the requested run (resume with a different
// architecture, sampling with an incompatible checkpoint).
struct ConfigMismatch : Error {
    using Error::Error;
};

}  // namespace ssmg
