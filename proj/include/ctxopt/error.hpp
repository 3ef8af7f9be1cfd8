// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes: ConfigError -> 2, DataError -> 3, RunError -> 4.
#pragma once

#include <stdexcept>
#include <string>

namespace ctxopt {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-supplied configuration (sizes, placements, init phrases, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed, truncated or inconsistent data files and inputs.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// A training/evaluation run failed after it started (divergence, census mismatch).
class RunError : public Error {
public:
    explicit RunError(const std::string& msg) : Error(msg) {}
};

// Shape disagreement between tensors.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Non-finite or degenerate numeric input (NaN/Inf, zero norms).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// API contract violations (out-of-range ids, non-scalar loss, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

} // namespace ctxopt
