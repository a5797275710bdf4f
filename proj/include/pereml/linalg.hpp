#pragma once

#include <Eigen/Dense>

#include "pereml/errors.hpp"

namespace pereml {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace linalg {

/// Relative pivot threshold used for every rank decision in the library.
inline constexpr double kRankTolerance = 1e-10;

/// Numerical rank from a column-pivoted QR, pivots below
/// kRankTolerance * largest pivot are treated as zero.
inline Eigen::Index rank(const MatrixXd& m) {
    if (m.size() == 0) {
        return 0;
    }
    Eigen::ColPivHouseholderQR<MatrixXd> qr(m);
    qr.setThreshold(kRankTolerance);
    return qr.rank();
}

/// Column-wise concatenation.
inline MatrixXd hcat(const MatrixXd& a, const MatrixXd& b) {
    if (a.size() == 0) {
        return b;
    }
    if (b.size() == 0) {
        return a;
    }
    MatrixXd out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

/// Residual maker I - X(X'X)^+X' from an orthonormal basis of col(X).
inline MatrixXd residual_maker(const MatrixXd& x) {
    const Eigen::Index n = x.rows();
    Eigen::ColPivHouseholderQR<MatrixXd> qr(x);
    qr.setThreshold(kRankTolerance);
    const Eigen::Index r = qr.rank();
    MatrixXd q = qr.householderQ() * MatrixXd::Identity(n, r);
    return MatrixXd::Identity(n, n) - q * q.transpose();
}

/// Symmetric positive definite inverse. Throws NumericalError when the
/// Cholesky factorization fails.
inline MatrixXd spd_inverse(const MatrixXd& a, const char* what) {
    Eigen::LLT<MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) {
        throw NumericalError(std::string(what) + " is not positive definite");
    }
    return llt.solve(MatrixXd::Identity(a.rows(), a.cols()));
}

inline MatrixXd symmetrize(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

}  // namespace linalg
}  // namespace pereml
