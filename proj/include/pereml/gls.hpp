#pragma once

// Empirical generalized least squares with plug-in variance components.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pereml/errors.hpp"
#include "pereml/linalg.hpp"
#include "pereml/reml.hpp"

namespace pereml {

enum class VarianceSource { PeReml, RsReml, Other };

inline const char* to_string(VarianceSource v) {
    switch (v) {
        case VarianceSource::PeReml:
            return "PE-REML";
        case VarianceSource::RsReml:
            return "RS-REML";
        default:
            return "other";
    }
}

struct FixedEffectsFit {
    VectorXd beta_hat;
    MatrixXd psi_hat;
    /// Kenward-Roger adjusted covariance; equals psi_hat until adjusted.
    MatrixXd kr_covariance;
    VectorXd se_unadjusted;
    VectorXd se_kr;
    bool kr_applied = false;
    VarianceSource variance_source = VarianceSource::Other;
    VarianceEstimate sigma_hat_used;
    std::vector<std::string> coefficient_names;
    std::vector<std::string> warnings;
};

/// Sigma = sigma^2 (sum_j gamma_j Z_j Z_j' + I).
inline MatrixXd assemble_sigma(const VectorXd& sigma, const std::vector<MatrixXd>& z) {
    if (sigma.size() != static_cast<Eigen::Index>(z.size()) + 1) {
        throw SchemaError("variance vector length does not match stratum count");
    }
    const double s2 = sigma(sigma.size() - 1);
    if (!(s2 > 0.0)) {
        throw NumericalError("residual variance is zero: degenerate model");
    }
    if ((sigma.head(sigma.size() - 1).array() < 0.0).any()) {
        throw NumericalError("variance components must be nonnegative");
    }
    if (z.empty()) {
        throw SchemaError("assemble_sigma needs the run count; use assemble_sigma(sigma, z, n)");
    }
    const Eigen::Index n = z.front().rows();
    MatrixXd s = MatrixXd::Identity(n, n);
    for (std::size_t j = 0; j < z.size(); ++j) {
        s.noalias() += (sigma(static_cast<Eigen::Index>(j)) / s2) * (z[j] * z[j].transpose());
    }
    return s2 * s;
}

/// Overload that also covers the single-stratum (iid) case.
inline MatrixXd assemble_sigma(const VectorXd& sigma, const std::vector<MatrixXd>& z, Eigen::Index n) {
    if (z.empty()) {
        if (sigma.size() != 1 || !(sigma(0) > 0.0)) {
            throw NumericalError("residual variance is zero: degenerate model");
        }
        return sigma(0) * MatrixXd::Identity(n, n);
    }
    return assemble_sigma(sigma, z);
}

namespace detail {

/// LDLT-based SPD inverse. Falls back to a 1e-12 * trace ridge and records a
/// warning if the factorization is not positive definite.
inline MatrixXd guarded_spd_inverse(const MatrixXd& a, const char* what, std::vector<std::string>& warnings) {
    Eigen::LDLT<MatrixXd> ldlt(a);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 0.0).all()) {
        return ldlt.solve(MatrixXd::Identity(a.rows(), a.cols()));
    }
    const double ridge = 1e-12 * a.trace();
    warnings.push_back(std::string(what) + " not positive definite; ridge " + std::to_string(ridge) +
                       " added for diagnostics");
    MatrixXd r = a + ridge * MatrixXd::Identity(a.rows(), a.cols());
    Eigen::LDLT<MatrixXd> again(r);
    return again.solve(MatrixXd::Identity(a.rows(), a.cols()));
}

}  // namespace detail

/// beta = (X' S^-1 X)^-1 X' S^-1 y and Psi = (X' S^-1 X)^-1 with S built from
/// the plug-in variance components.
inline FixedEffectsFit gls_fit(const MatrixXd& x, const std::vector<MatrixXd>& z,
                               const VarianceEstimate& sigma_estimate, const VectorXd& y,
                               VarianceSource source = VarianceSource::Other) {
    if (x.rows() != y.size()) {
        throw SchemaError("fixed model rows differ from response length");
    }
    FixedEffectsFit fit;
    fit.variance_source = source;
    fit.sigma_hat_used = sigma_estimate;
    const MatrixXd sigma = assemble_sigma(sigma_estimate.sigma, z, x.rows());
    const MatrixXd sigma_inv = detail::guarded_spd_inverse(sigma, "Sigma", fit.warnings);
    const MatrixXd w = sigma_inv * x;
    const MatrixXd a = linalg::symmetrize(x.transpose() * w);
    if (linalg::rank(a) != a.cols()) {
        throw NumericalError("X' Sigma^-1 X is rank deficient");
    }
    fit.psi_hat = linalg::symmetrize(detail::guarded_spd_inverse(a, "X' Sigma^-1 X", fit.warnings));
    fit.beta_hat = fit.psi_hat * (w.transpose() * y);
    fit.kr_covariance = fit.psi_hat;
    fit.se_unadjusted = fit.psi_hat.diagonal().cwiseSqrt();
    fit.se_kr = fit.se_unadjusted;
    return fit;
}

/// True when OLS and GLS give the same coefficients for every admissible
/// variance vector. Requires both the algebraic criterion (col(X) invariant
/// under every Z_j Z_j') and agreement of the two coefficient maps at a few
/// random interior points.
inline bool equivalence_check(const MatrixXd& x, const std::vector<MatrixXd>& z) {
    const Eigen::Index n = x.rows();
    const MatrixXd m = linalg::residual_maker(x);
    for (const auto& zj : z) {
        const MatrixXd zzx = zj * (zj.transpose() * x);
        if ((m * zzx).norm() > 1e-10 * std::max(1.0, zzx.norm())) {
            return false;
        }
    }
    const MatrixXd xtx = x.transpose() * x;
    const MatrixXd ols = xtx.ldlt().solve(x.transpose());
    std::mt19937_64 gen(0x5eed);
    std::uniform_real_distribution<double> unif(0.05, 20.0);
    for (int trial = 0; trial < 3; ++trial) {
        VectorXd sigma(static_cast<Eigen::Index>(z.size()) + 1);
        for (Eigen::Index j = 0; j < sigma.size(); ++j) {
            sigma(j) = unif(gen);
        }
        const MatrixXd s = assemble_sigma(sigma, z, n);
        const MatrixXd si_x = s.llt().solve(x);
        const MatrixXd gls = (x.transpose() * si_x).ldlt().solve(si_x.transpose());
        if ((gls - ols).norm() > 1e-8 * std::max(1.0, ols.norm())) {
            return false;
        }
    }
    return true;
}

}  // namespace pereml
