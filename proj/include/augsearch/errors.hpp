#pragma once

#include <stdexcept>
#include <string>

namespace augsearch {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible for the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A forward value became NaN or infinite.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An API was used out of its contract (e.g. a tape consumed twice).
class UsageError : public Error {
public:
    using Error::Error;
};

/// An argument lies outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Invalid user-facing configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input document or file; the message carries the offending path.
class ParseError : public Error {
public:
    using Error::Error;
};

}  // namespace augsearch
