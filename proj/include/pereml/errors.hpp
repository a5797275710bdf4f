#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace pereml {

/// Malformed input: bad file, bad schema, wrong dimensions.
class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Stratum labels that do not nest. Carries the first offending run (0-based)
/// and the inner stratum index.
class NestingError : public SchemaError {
public:
    NestingError(const std::string& what, int run, int stratum)
        : SchemaError(what), run_(run), stratum_(stratum) {}

    int run() const noexcept { return run_; }
    int stratum() const noexcept { return stratum_; }

private:
    int run_;
    int stratum_;
};

/// Tolerance-based treatment matching produced a non-transitive grouping.
class AmbiguousTreatmentError : public SchemaError {
public:
    using SchemaError::SchemaError;
};

/// Anything that fails for numerical reasons: non-PD matrices, rank deficiency,
/// singular information.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The variance components cannot be identified from the residual likelihood.
class InfeasibleError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// The optimizer hit its iteration cap.
class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, Eigen::VectorXd last_iterate, double gradient_norm)
        : NumericalError(what), last_iterate_(std::move(last_iterate)), gradient_norm_(gradient_norm) {}

    const Eigen::VectorXd& last_iterate() const noexcept { return last_iterate_; }
    double gradient_norm() const noexcept { return gradient_norm_; }

private:
    Eigen::VectorXd last_iterate_;
    double gradient_norm_;
};

}  // namespace pereml
