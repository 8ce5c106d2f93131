#pragma once

#include <stdexcept>
#include <string>

namespace aimkp {

// Malformed files, impossible generator specs, schema violations.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite losses/gradients, divergence.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace aimkp
