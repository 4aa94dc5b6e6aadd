#pragma once

#include <stdexcept>
#include <string>

namespace sdtl {

// Error taxonomy used across the library. Everything derives from Error so
// callers can catch one type at the CLI boundary.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/axis disagreement between tensors (names both shapes in the message).
struct DimensionError : Error {
    using Error::Error;
};

// Invalid architecture or hyperparameter combination.
struct ConfigError : Error {
    using Error::Error;
};

// API misuse: a documented precondition was violated.
struct ContractError : Error {
    using Error::Error;
};

// Malformed file content (reports a byte offset where possible).
struct ParseError : Error {
    using Error::Error;
};

// Unusable input data (missing files, undersized images, empty datasets).
struct InputError : Error {
    using Error::Error;
};

}  // namespace sdtl
