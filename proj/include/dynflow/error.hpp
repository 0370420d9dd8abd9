#pragma once

#include <stdexcept>
#include <string>

namespace dynflow {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Argument outside the domain of a family or formula (t outside [0,T], s <= 0, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Dimensions of vectors and matrices do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A distance matrix with a zero off-diagonal entry where a logarithm is required.
class DegenerateMetricError : public Error {
public:
    using Error::Error;
};

// Tabulated family differentiated at a tabulation boundary.
class BoundaryError : public Error {
public:
    using Error::Error;
};

// Transport marginals with different total mass.
class MarginalError : public Error {
public:
    using Error::Error;
};

// s >= t where s < t is required.
class OrderingError : public Error {
public:
    using Error::Error;
};

class UnsupportedGeometryError : public Error {
public:
    using Error::Error;
};

// Singular or ill-posed linear system.
class SolverError : public Error {
public:
    using Error::Error;
};

class ProblemError : public Error {
public:
    using Error::Error;
};

// Iterative method stopped without reaching its tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual)
        : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

// A minimizing-movement step whose inner solver failed.
class StepError : public Error {
public:
    StepError(const std::string& what, double residual, std::size_t step)
        : Error(what), residual_(residual), step_(step) {}
    double residual() const noexcept { return residual_; }
    std::size_t step() const noexcept { return step_; }

private:
    double residual_;
    std::size_t step_;
};

// Scenario configuration rejected at load time; key() is the dotted key path.
class LoadError : public Error {
public:
    LoadError(const std::string& key, const std::string& what)
        : Error(key.empty() ? what : key + ": " + what), key_(key) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

}  // namespace dynflow
