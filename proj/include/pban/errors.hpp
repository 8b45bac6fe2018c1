#pragma once

#include <stdexcept>
#include <string>

namespace pban {

// Every library failure derives from Error so callers can map categories
// onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Extents that do not line up (matmul inner dims, channel counts, ...).
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid hyperparameter or configuration value.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Caller broke an API precondition (non-scalar backward root, missing gradient).
class ContractError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf produced by an operation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Wrong magic / header / version in an input file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Truncated or corrupt payload.
class DecodeError : public Error {
public:
    using Error::Error;
};

/// Malformed value inside an otherwise well-formed file (e.g. MOS column).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Dataset-level problem: size mismatch in a pair, no patches, empty manifest.
class DataError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Correlation is undefined (zero variance, all ties, degenerate fit).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

}  // namespace pban
