#pragma once

// Kenward-Roger adjusted covariance Psi + 2 Lambda of the empirical GLS
// estimator, where
//   Lambda = Psi { sum_ij u_ij (Q_ij - P_i Psi P_j) } Psi,
//   P_i    = X' dSigma^-1/dsigma_i X,
//   Q_ij   = X' dSigma^-1/dsigma_i Sigma dSigma^-1/dsigma_j X.
// The generic path differentiates Sigma^-1 analytically; the split-plot and
// split-split-plot paths use closed forms and serve as cross-checks.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pereml/errors.hpp"
#include "pereml/gls.hpp"
#include "pereml/linalg.hpp"
#include "pereml/reml.hpp"

namespace pereml {

struct KRWorkspace {
    MatrixXd c;
    std::vector<MatrixXd> d_sigma_inv;
    std::vector<MatrixXd> p;
    /// q[i][j] = Q_ij.
    std::vector<std::vector<MatrixXd>> q;
    MatrixXd lambda_hat;
};

namespace detail {

inline void check_u(const VarianceEstimate& est) {
    const Eigen::Index k = est.sigma.size();
    if (est.u_matrix.rows() != k || est.u_matrix.cols() != k) {
        throw SchemaError("Kenward-Roger adjustment needs the variance-component covariance (u_matrix)");
    }
}

/// Fills P, Q and Lambda from derivative matrices and returns Psi + 2 Lambda.
inline MatrixXd kr_from_derivatives(const MatrixXd& psi, const MatrixXd& x, const MatrixXd& sigma,
                                    const std::vector<MatrixXd>& d, const MatrixXd& u, KRWorkspace* ws) {
    const std::size_t k = d.size();
    std::vector<MatrixXd> dx(k);
    std::vector<MatrixXd> p(k);
    for (std::size_t i = 0; i < k; ++i) {
        dx[i] = d[i] * x;
        p[i] = x.transpose() * dx[i];
    }
    MatrixXd inner = MatrixXd::Zero(psi.rows(), psi.cols());
    std::vector<std::vector<MatrixXd>> q(k, std::vector<MatrixXd>(k));
    for (std::size_t i = 0; i < k; ++i) {
        const MatrixXd s_dxi = sigma * dx[i];
        for (std::size_t j = 0; j < k; ++j) {
            q[i][j] = s_dxi.transpose() * dx[j];
            inner += u(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                     (q[i][j] - p[i] * psi * p[j]);
        }
    }
    const MatrixXd lambda = linalg::symmetrize(psi * inner * psi);
    MatrixXd adjusted = linalg::symmetrize(psi + 2.0 * lambda);
    if (ws != nullptr) {
        ws->d_sigma_inv = d;
        ws->p = std::move(p);
        ws->q = std::move(q);
        ws->lambda_hat = lambda;
    }
    for (Eigen::Index i = 0; i < adjusted.rows(); ++i) {
        if (adjusted(i, i) < 0.0) {
            throw NumericalError("Kenward-Roger adjusted covariance has a negative diagonal entry at index " +
                                 std::to_string(i));
        }
    }
    return adjusted;
}

inline MatrixXd c_matrix(const MatrixXd& sigma_inv, const MatrixXd& x) {
    const MatrixXd w = sigma_inv * x;
    const MatrixXd a = x.transpose() * w;
    return sigma_inv - w * a.ldlt().solve(w.transpose());
}

}  // namespace detail

/// Builds C, dSigma^-1/dsigma_i = -Sigma^-1 (dSigma/dsigma_i) Sigma^-1, P, Q
/// and Lambda at the plug-in estimate. Lambda is zero when a blocking
/// component lies on the boundary.
inline KRWorkspace kr_workspace(const MatrixXd& psi, const VarianceEstimate& est, const MatrixXd& x,
                                const std::vector<MatrixXd>& z) {
    detail::check_u(est);
    const Eigen::Index n = x.rows();
    const MatrixXd sigma = assemble_sigma(est.sigma, z, n);
    const MatrixXd sigma_inv = linalg::spd_inverse(sigma, "Sigma");
    KRWorkspace ws;
    ws.c = detail::c_matrix(sigma_inv, x);
    std::vector<MatrixXd> d;
    for (const auto& zj : z) {
        const MatrixXd sz = sigma_inv * zj;
        d.push_back(-(sz * sz.transpose()));
    }
    d.push_back(-(sigma_inv * sigma_inv));
    detail::kr_from_derivatives(psi, x, sigma, d, est.u_matrix, &ws);
    if (est.any_block_on_boundary()) {
        ws.lambda_hat.setZero();
    }
    return ws;
}

/// Psi + 2 Lambda for any variance-components structure. Returns Psi
/// unchanged when any blocking component is on the boundary.
inline MatrixXd kr_adjust_generic(const FixedEffectsFit& fit, const VarianceEstimate& est, const MatrixXd& x,
                                  const std::vector<MatrixXd>& z) {
    if (fit.psi_hat.rows() != x.cols()) {
        throw SchemaError("fit dimension does not match fixed model");
    }
    if (est.any_block_on_boundary()) {
        return fit.psi_hat;
    }
    detail::check_u(est);
    const Eigen::Index n = x.rows();
    const MatrixXd sigma = assemble_sigma(est.sigma, z, n);
    Eigen::LLT<MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("Sigma is not positive definite");
    }
    std::vector<MatrixXd> d;
    d.reserve(z.size() + 1);
    for (const auto& zj : z) {
        const MatrixXd sz = llt.solve(zj);
        d.push_back(-(sz * sz.transpose()));
    }
    const MatrixXd sigma_inv = llt.solve(MatrixXd::Identity(n, n));
    d.push_back(-(sigma_inv * sigma_inv));
    return detail::kr_from_derivatives(fit.psi_hat, x, sigma, d, est.u_matrix, nullptr);
}

/// Stores the adjusted covariance and standard errors in `fit`.
inline void apply_kr(FixedEffectsFit& fit, const VarianceEstimate& est, const MatrixXd& x,
                     const std::vector<MatrixXd>& z) {
    fit.kr_covariance = kr_adjust_generic(fit, est, x, z);
    fit.se_kr = fit.kr_covariance.diagonal().cwiseSqrt();
    fit.kr_applied = !est.any_block_on_boundary();
}

namespace detail {

inline int common_column_sum(const MatrixXd& z, const char* what) {
    const Eigen::RowVectorXd sums = z.colwise().sum();
    const double first = sums(0);
    if ((sums.array() != first).any()) {
        throw SchemaError(std::string(what) + ": unbalanced structure (unequal unit sizes)");
    }
    return static_cast<int>(first);
}

}  // namespace detail

/// Split-plot closed forms: s = 1, every whole plot holds k runs. The u
/// entries come from the closed-form inverse information with C built from
/// `reml_model` (X_t for pure-error estimates, X for polynomial ones).
inline MatrixXd kr_adjust_splitplot_closed(const FixedEffectsFit& fit, const VarianceEstimate& est,
                                           const MatrixXd& x, const MatrixXd& z, int k,
                                           const MatrixXd& reml_model) {
    if (est.sigma.size() != 2) {
        throw SchemaError("split-plot closed form needs exactly one blocking stratum");
    }
    if (detail::common_column_sum(z, "split-plot closed form") != k) {
        throw SchemaError("split-plot closed form: whole-plot size does not equal k");
    }
    if (est.any_block_on_boundary()) {
        return fit.psi_hat;
    }
    const Eigen::Index n = x.rows();
    const double s1 = est.sigma(0);
    const double s2 = est.sigma(1);
    const double a = s2 + k * s1;
    const MatrixXd zz = z * z.transpose();
    const MatrixXd eye = MatrixXd::Identity(n, n);
    const MatrixXd sigma = s2 * eye + s1 * zz;
    const MatrixXd b = (s1 * (2.0 * s2 + k * s1) / (a * a)) * zz - eye;

    const MatrixXd zzx = zz * x;
    const MatrixXd bx = b * x;
    const MatrixXd p1 = -(1.0 / (a * a)) * x.transpose() * zzx;
    const MatrixXd p2 = (1.0 / (s2 * s2)) * x.transpose() * bx;
    const MatrixXd q11 = (1.0 / std::pow(a, 4)) * zzx.transpose() * sigma * zzx;
    const MatrixXd q22 = (1.0 / std::pow(s2, 4)) * bx.transpose() * sigma * bx;
    const MatrixXd q12 = -(1.0 / (s2 * s2 * a * a)) * zzx.transpose() * sigma * bx;

    const MatrixXd sigma_inv = (1.0 / s2) * (eye - (s1 / a) * zz);
    const MatrixXd c = detail::c_matrix(sigma_inv, reml_model);
    const MatrixXd cc = c * c;
    const MatrixXd ztcz = z.transpose() * c * z;
    const double tr_cc = cc.trace();
    const double tr_zczzcz = (ztcz * ztcz).trace();
    const double tr_zccz = (z.transpose() * cc * z).trace();
    const double cdet = tr_cc * tr_zczzcz - tr_zccz * tr_zccz;
    const double u11 = 2.0 * tr_cc / cdet;
    const double u22 = 2.0 * tr_zczzcz / cdet;
    const double u12 = -2.0 * tr_zccz / cdet;

    const MatrixXd& psi = fit.psi_hat;
    const MatrixXd inner = u11 * (q11 - p1 * psi * p1) + u22 * (q22 - p2 * psi * p2) +
                           u12 * (q12 - p1 * psi * p2) + u12 * (q12.transpose() - p2 * psi * p1);
    const MatrixXd lambda = linalg::symmetrize(psi * inner * psi);
    return linalg::symmetrize(psi + 2.0 * lambda);
}

/// Closed-form inverse of Sigma for a balanced split-split-plot design (b
/// subplots per whole plot, k runs per subplot) and its derivatives with
/// respect to (sigma_1^2, sigma_2^2, sigma^2).
struct SplitSplitInverse {
    MatrixXd sigma_inv;
    std::array<MatrixXd, 3> d_sigma_inv;
};

inline SplitSplitInverse sigma_inverse_splitsplit_closed(const VectorXd& sigma, const MatrixXd& z1,
                                                         const MatrixXd& z2, int b, int k) {
    if (sigma.size() != 3) {
        throw SchemaError("split-split-plot closed form needs three variance components");
    }
    if (detail::common_column_sum(z1, "split-split-plot whole plots") != b * k ||
        detail::common_column_sum(z2, "split-split-plot subplots") != k) {
        throw SchemaError("split-split-plot closed form: unit sizes do not match b and k");
    }
    const MatrixXd nest = z1.transpose() * z2;
    if (((nest.array() != 0.0).cast<int>().colwise().sum() != 1).any()) {
        throw SchemaError("split-split-plot closed form: subplots are not nested in whole plots");
    }
    const double s1 = sigma(0);
    const double s2 = sigma(1);
    const double s0 = sigma(2);
    if (!(s0 > 0.0)) {
        throw NumericalError("residual variance is zero: degenerate model");
    }
    const Eigen::Index n = z1.rows();
    const double a = s0 + s2 * k;
    const double c = s0 + s1 * b * k + s2 * k;
    const MatrixXd zz1 = z1 * z1.transpose();
    const MatrixXd zz2 = z2 * z2.transpose();
    SplitSplitInverse out;
    out.sigma_inv = (1.0 / s0) * (MatrixXd::Identity(n, n) - (s0 * s1 / (a * c)) * zz1 - (s2 / a) * zz2);
    const MatrixXd& si = out.sigma_inv;
    out.d_sigma_inv[0] = -(si * zz1 * si);
    out.d_sigma_inv[1] = -(si * zz2 * si);
    out.d_sigma_inv[2] = -(si * si);
    return out;
}

/// Kenward-Roger adjustment built on the split-split-plot closed-form
/// inverse. u comes from the estimate's (numerically inverted) information.
inline MatrixXd kr_adjust_splitsplit_closed(const FixedEffectsFit& fit, const VarianceEstimate& est,
                                            const MatrixXd& x, const MatrixXd& z1, const MatrixXd& z2, int b,
                                            int k) {
    if (est.any_block_on_boundary()) {
        return fit.psi_hat;
    }
    detail::check_u(est);
    const SplitSplitInverse inv = sigma_inverse_splitsplit_closed(est.sigma, z1, z2, b, k);
    const Eigen::Index n = x.rows();
    const MatrixXd sigma = est.sigma(2) * MatrixXd::Identity(n, n) + est.sigma(0) * z1 * z1.transpose() +
                           est.sigma(1) * z2 * z2.transpose();
    std::vector<MatrixXd> d(inv.d_sigma_inv.begin(), inv.d_sigma_inv.end());
    return detail::kr_from_derivatives(fit.psi_hat, x, sigma, d, est.u_matrix, nullptr);
}

}  // namespace pereml
