#pragma once

#include <stdexcept>
#include <string>

namespace simva {

// Base class for all errors raised by the library. CLI maps these to
// machine-readable error lines and a nonzero exit code.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/shape contract violations (dimension mismatches, divisibility).
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Bad argument values (out-of-range indices, degenerate specs, duplicates).
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// Zero-norm vectors where a normalization is required.
class SingularityError : public Error {
public:
    explicit SingularityError(const std::string& msg) : Error(msg) {}
};

// Malformed serialized containers (manifest/blob mismatches, truncation).
class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Mismatched parameter-store structure (differing names/shapes).
class StructureError : public Error {
public:
    explicit StructureError(const std::string& msg) : Error(msg) {}
};

// A documented invariant was broken by a caller (contract breach between
// modules, e.g. the sampler failing to include the ground truth).
class InvariantViolation : public Error {
public:
    explicit InvariantViolation(const std::string& msg) : Error(msg) {}
};

} // namespace simva
