#pragma once

#include <stdexcept>
#include <string>

namespace atlasgen {

// Shape/contract violations on tensors, volumes, networks.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or missing files, corrupt inputs, un-runnable datasets.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid user-facing arguments (CLI exit code 2).
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses / diverged optimization (CLI exit code 4).
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

} // namespace atlasgen
