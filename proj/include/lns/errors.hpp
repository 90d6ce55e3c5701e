#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lns {

// Base class for everything this library throws on purpose.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corrupted or malformed on-disk data (bad magic, truncation, non-finite
// payload, ...). Carries the byte offset where parsing gave up.
struct format_error : error {
    format_error(const std::string& msg, size_t byte_offset)
        : error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    size_t offset;
};

// Structural disagreement between inputs: tensor name/shape sets differ,
// base-model fingerprints do not match, unknown task ids, empty splits.
struct mismatch_error : error {
    using error::error;
};

// Numeric failure at runtime: training diverged, solver hit a singular
// system, bracket not found.
struct numeric_error : error {
    using error::error;
};

}  // namespace lns
