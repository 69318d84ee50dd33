#pragma once

#include <stdexcept>
#include <string>

namespace flame {

// Base of every exception thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shape disagreement (rank, dimension, or size mismatch).
struct ShapeError : Error {
    using Error::Error;
};

// Violated operation precondition other than a shape mismatch.
struct ContractError : Error {
    using Error::Error;
};

// Invalid or inconsistent run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or unusable input data (parse failures, empty datasets).
struct DataError : Error {
    using Error::Error;
};

// Corrupt or incompatible serialized container (cache or checkpoint).
struct FormatError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace flame
