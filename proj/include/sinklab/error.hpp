#pragma once

#include <stdexcept>
#include <string>

namespace sinklab {

// Error categories map to CLI exit codes (see tools/sinklab.cpp).
enum class ErrorCategory {
    config,       // bad configuration value or config-file syntax
    dimension,    // tensor shape mismatch
    contract,     // API precondition violated (non-scalar loss, bad rows, ...)
    data,         // corpus/tokenization problems
    numeric,      // non-finite values, degenerate numerics
    io,           // file read/write failures
    container,    // checkpoint container malformed or mismatched
    convergence,  // iterative solver failed to converge
};

const char* category_name(ErrorCategory cat);

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, const std::string& msg)
        : std::runtime_error(std::string(category_name(cat)) + ": " + msg), cat_(cat) {}

    ErrorCategory category() const { return cat_; }

private:
    ErrorCategory cat_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorCategory::config, msg) {}
};
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(ErrorCategory::dimension, msg) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(ErrorCategory::contract, msg) {}
};
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(ErrorCategory::data, msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ErrorCategory::numeric, msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorCategory::io, msg) {}
};
struct ContainerError : Error {
    explicit ContainerError(const std::string& msg) : Error(ErrorCategory::container, msg) {}
};
struct ConvergenceError : Error {
    ConvergenceError(const std::string& msg, double residual)
        : Error(ErrorCategory::convergence, msg), last_residual(residual) {}
    double last_residual;
};

}  // namespace sinklab
