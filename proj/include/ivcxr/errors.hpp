#pragma once

#include <stdexcept>
#include <string>

namespace ivcxr {

/// Precondition or shape/contract failure. CLI exit status 1.
class ContractViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed text input (manifest, config). Reported with a line number.
class ParseError : public ContractViolation {
public:
    ParseError(const std::string& what, std::size_t line)
        : ContractViolation("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A metric that is mathematically undefined for the given input (e.g. AUC on one class).
class UndefinedMetric : public ContractViolation {
public:
    using ContractViolation::ContractViolation;
};

/// Gradient check could not be carried out (non-deterministic objective).
class CheckInvalid : public ContractViolation {
public:
    using ContractViolation::ContractViolation;
};

/// NaN/Inf produced somewhere in a computation. CLI exit status 2.
class NumericFault : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File system or binary decode failure. CLI exit status 3.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

}  // namespace ivcxr
