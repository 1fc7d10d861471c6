#pragma once

#include <stdexcept>
#include <string>

namespace sda {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/primitive shape disagreement. Message names the primitive and both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite value produced by a primitive (forward or backward).
struct NumericError : Error {
    using Error::Error;
};

// Bad on-disk data: dataset files, embedding files, checkpoints.
struct DataError : Error {
    using Error::Error;
};

// Bad experiment configuration or CLI arguments.
struct ConfigError : Error {
    using Error::Error;
};

// Precondition violation on an operation argument.
struct InvalidArgument : Error {
    using Error::Error;
};

}  // namespace sda
