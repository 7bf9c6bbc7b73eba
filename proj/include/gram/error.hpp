#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace gram {

// Shape/extent mismatch between operands.
struct DimError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value (depth, cardinality, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed file contents (dataset records, checkpoints).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operation issued in a state that forbids it (tape reuse, eval before train).
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace gram
