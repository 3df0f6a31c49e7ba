#pragma once

#include <stdexcept>
#include <string>

namespace lungquant {

// Bad input data: unreadable/malformed files, invariant violations, shape
// mismatches. Maps to CLI exit code 3.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Bad invocation: unknown flags, out-of-range options. Maps to exit code 2.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values or failed numerical procedures. Maps to exit code 4.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace lungquant
