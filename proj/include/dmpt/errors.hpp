#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dmpt {

// Base for everything the library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / dimension / arity mismatches. Messages name the offending shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Bad parameter values: non-positive temperature, out-of-range labels,
// zero-norm vectors, unknown class ids.
struct ValueError : Error {
    using Error::Error;
};

// A caller broke an API contract: backward on a non-scalar, non-normalized
// features where unit norm is required, label missing from a selection,
// stepping a parameter without a gradient.
struct ContractError : Error {
    using Error::Error;
};

// Inconsistent configuration: overlapping prompt assignments, injection
// plans longer than the network, vocabulary overflow.
struct ConfigError : Error {
    using Error::Error;
};

// Dataset-level problems: missing images, empty batches, empty query sets.
struct DataError : Error {
    using Error::Error;
};

// Filesystem failures.
struct IoError : Error {
    using Error::Error;
};

// Malformed serialized files; carries the byte offset of the problem.
struct FormatError : Error {
    FormatError(const std::string& msg, std::uint64_t offset)
        : Error(msg + " (byte offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    std::uint64_t byte_offset;
};

// Command-line misuse.
struct UsageError : Error {
    using Error::Error;
};

// Training produced a non-finite loss; carries the global step index.
struct DivergenceError : Error {
    DivergenceError(const std::string& msg, std::int64_t step)
        : Error(msg + " (step " + std::to_string(step) + ")"), step_index(step) {}
    std::int64_t step_index;
};

}  // namespace dmpt
