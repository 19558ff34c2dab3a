#pragma once

#include <stdexcept>
#include <string>

namespace mfl {

// Base for everything the library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
struct ShapeError : Error {
    using Error::Error;
};

// Index or label outside its valid range.
struct IndexError : Error {
    using Error::Error;
};

// Operation called in the wrong state (no active tape, missing grads, ...).
struct StateError : Error {
    using Error::Error;
};

// Bad values: non-finite inputs, violated contracts, degenerate data.
struct ValueError : Error {
    using Error::Error;
};

// Numeric failure at runtime (divergence, violated verified bound).
struct NumericError : Error {
    using Error::Error;
};

// Invalid configuration (bad hyperparameters, unknown keys, k > K, ...).
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace mfl
