#pragma once

#include <stdexcept>
#include <string>

namespace edlab {

// Shapes of operands disagree.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Input is well-formed but carries nothing to compute on (empty mask, empty instruction).
struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf reached a place where it must not.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line(line) {}
    std::size_t line;
};

// gap_closed with equal bounds, and similar.
struct UndefinedMetricError : std::domain_error {
    using std::domain_error::domain_error;
};

}  // namespace edlab

namespace edlab {

// Invalid run configuration (unknown key, wrong type, out-of-range value).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace edlab
