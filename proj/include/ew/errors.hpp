#pragma once

#include <stdexcept>
#include <string>

namespace ew {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid static configuration (odd head_dim, mismatched net/cache dims, ...).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Operation illegal in the object's current state (e.g. sink append after seal).
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Norm below the cosine-similarity floor.
class DegenerateNormError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Diffusion time not on the schedule grid.
class ScheduleError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Fake score model used after too many generator updates without a refit.
class StalenessError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Mask that does not cover whole generation chunks.
class AlignmentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN or Inf in a loss; carries a diagnostic dump in what().
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or mismatched binary file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ew
