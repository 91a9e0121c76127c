#pragma once

#include <stdexcept>
#include <string>

namespace nfk {

/// Invalid configuration or argument combination (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (CLI exit code 3).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values, divergence, singular systems, non-deterministic operators
/// (CLI exit code 4).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not match an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace nfk
