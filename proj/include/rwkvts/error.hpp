#pragma once

#include <stdexcept>
#include <string>

namespace rwkvts {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Invalid hyperparameters or configuration keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or non-finite input data.
class DataError : public Error {
public:
    using Error::Error;
};

/// Non-finite intermediate values or gradients.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Caller violated an API precondition (e.g. backward from a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

}  // namespace rwkvts
