#pragma once

#include <stdexcept>
#include <string>

namespace btlm {

// Exception types map one-to-one onto CLI exit codes (see tools/btlm.cpp).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

// Malformed user input: bad token ids, overlong sequences, empty corpora.
struct InputError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Violated call preconditions (non-scalar loss, reused tape, cache misuse).
struct ContractError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

}  // namespace btlm
