#pragma once

#include <stdexcept>
#include <string>

namespace metfa {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform to the operation.
struct ShapeError : Error {
    using Error::Error;
};

// Operation applied outside its mathematical domain (e.g. log of a
// non-positive value).
struct DomainError : Error {
    using Error::Error;
};

// A non-finite value appeared where finiteness is required (gradients,
// finite-difference probes, parameter updates).
struct NumericError : Error {
    using Error::Error;
};

// A loss was asked to average over zero samples.
struct EmptyBatchError : Error {
    using Error::Error;
};

// A pseudo-class has queries but the batch lacks the source supports the
// loss definition needs.
struct MissingSupportError : Error {
    using Error::Error;
};

// A dataset class is too small for the requested batch protocol.
struct InsufficientDataError : Error {
    using Error::Error;
};

// Malformed configuration or serialized file.
struct ConfigError : Error {
    using Error::Error;
};

} // namespace metfa
