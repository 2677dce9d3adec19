#pragma once

#include <stdexcept>
#include <string>

namespace pivotmerge {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or truncated container / JSON input.
class FormatError : public Error {
public:
    using Error::Error;
};

// Mismatched shapes, missing layers, inconsistent bias presence.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or operator parameter.
class ConfigError : public Error {
public:
    using Error::Error;
};

// SVD non-convergence, non-finite values and similar.
class NumericalError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace pivotmerge
