#pragma once

#include <stdexcept>
#include <string>

namespace leverlm {

// Base of every error the library raises. The CLI maps ValidationError
// subclasses to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

// Bad parameter values (dimensions, counts, K > m, ...).
class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// File content disagrees with the expected layout (version, shape, names).
class SchemaError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : ValidationError(file + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// A feature the operation needs is missing (e.g. text features).
class CapabilityError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

// Non-finite value encountered; the message names the tensor.
class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace leverlm
