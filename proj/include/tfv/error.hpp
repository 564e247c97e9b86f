#pragma once

#include <stdexcept>
#include <string>

namespace tfv {

// Shapes of two operands disagree.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Index or scalar argument outside its admissible range.
class RangeError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

// Malformed or inconsistent configuration; message carries the field path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// On-disk artifact failed a version, checksum or existence check.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced a NaN/Inf loss.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace tfv
