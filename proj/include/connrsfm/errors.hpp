#pragma once

#include <stdexcept>
#include <string>

namespace connrsfm {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input outside the mathematical domain of an operation (point behind the
/// camera, non-positive depth, query outside a fitted spline domain...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Local geometry too close to singular to be trusted.
class DegenerateGeometryError : public Error {
public:
    using Error::Error;
};

/// Least-squares fit whose normal equations are rank deficient.
class IllPosedFitError : public Error {
public:
    using Error::Error;
};

class GraphError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace connrsfm
