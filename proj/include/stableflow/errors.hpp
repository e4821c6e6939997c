#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stableflow {

// Base of every error thrown by the library. Each subclass maps onto one CLI
// exit code (see tools/stableflow.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input with the wrong shape for the network or state it is applied to.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A caller broke an operation's precondition (wrong tape mode, non-scalar
// network where a potential is required, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Argument outside the mathematical domain of a closed-form expression.
class DomainError : public Error {
public:
    using Error::Error;
};

// Invalid configuration. `field` names the offending config key.
class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& message)
        : Error(field + ": " + message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// NaN/Inf produced by a numeric kernel.
class NumericFault : public Error {
public:
    using Error::Error;
};

// A trajectory left the finite region (non-finite state or norm above the
// divergence threshold).
class DivergenceError : public NumericFault {
public:
    DivergenceError(double time, const std::string& message)
        : NumericFault(message), time_(time) {}

    double time() const noexcept { return time_; }

private:
    double time_;
};

// Malformed file. `offset` is the byte position where parsing failed.
class ParseError : public Error {
public:
    ParseError(std::size_t offset, const std::string& message)
        : Error(message + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace stableflow
