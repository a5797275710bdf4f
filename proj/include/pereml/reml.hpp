#pragma once

// Residual (restricted) likelihood for variance-components models
//   Sigma = sum_j sigma_j^2 Z_j Z_j' + sigma^2 I
// with the fixed part X_g projected out, and its maximization.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pereml/errors.hpp"
#include "pereml/linalg.hpp"

namespace pereml {

/// Which fixed-effects matrix was projected out.
enum class FixedModel { FullTreatment, Polynomial, Other };

inline const char* to_string(FixedModel m) {
    switch (m) {
        case FixedModel::FullTreatment:
            return "full-treatment";
        case FixedModel::Polynomial:
            return "polynomial";
        default:
            return "other";
    }
}

/// Estimated variance components, ordered (sigma_1^2, ..., sigma_s^2, sigma^2).
struct VarianceEstimate {
    VectorXd sigma;
    VectorXd gamma;  // sigma_j^2 / sigma^2, j = 1..s
    MatrixXd info_matrix;
    MatrixXd u_matrix;  // inverse of info_matrix
    std::vector<bool> boundary_flags;
    double reml_loglik = 0.0;
    FixedModel fixed_model_tag = FixedModel::Other;
    int residual_df = 0;
    int iterations = 0;
    double gradient_norm = 0.0;
    bool used_nelder_mead = false;

    int n_components() const { return static_cast<int>(sigma.size()); }
    double residual_variance() const { return sigma(sigma.size() - 1); }
    bool any_block_on_boundary() const {
        return std::any_of(boundary_flags.begin(), boundary_flags.end() - 1, [](bool b) { return b; });
    }
};

struct RemlOptions {
    int max_iterations = 200;
    double criterion_tolerance = 1e-10;
    double parameter_tolerance = 1e-8;
    /// A component below boundary_ratio * sigma^2 is set to exactly zero.
    double boundary_ratio = 1e-10;
    /// Starting values are floored at start_floor * total residual variance.
    double start_floor = 1e-3;
    /// Consecutive non-improving scoring steps before switching to Nelder-Mead.
    int max_failed_steps = 5;
    /// Largest move in log-variance coordinates per scoring step.
    double max_log_step = 5.0;
    bool multi_start = false;
    FixedModel fixed_model_tag = FixedModel::Other;
};

namespace detail {

/// Everything derived from one evaluation of Sigma(sigma).
struct RemlTerms {
    double loglik = 0.0;
    VectorXd score;
    MatrixXd info;
    MatrixXd c;
};

/// Evaluates the residual log-likelihood and, optionally, its score and
/// expected information. `z` holds the blocking-stratum matrices; the
/// residual component's Z is the identity and is handled implicitly.
class RemlEvaluator {
public:
    RemlEvaluator(const MatrixXd& x, const std::vector<MatrixXd>& z, const VectorXd* y)
        : x_(x), z_(z), y_(y) {
        const Eigen::Index n = x.rows();
        for (const auto& zj : z_) {
            if (zj.rows() != n) {
                throw SchemaError("stratum matrix row count differs from fixed model row count");
            }
            zzt_.push_back(zj * zj.transpose());
        }
        if (y_ != nullptr && y_->size() != n) {
            throw SchemaError("response length differs from fixed model row count");
        }
    }

    int n_components() const { return static_cast<int>(z_.size()) + 1; }

    MatrixXd sigma_matrix(const VectorXd& sigma) const {
        const Eigen::Index n = x_.rows();
        MatrixXd s = sigma(sigma.size() - 1) * MatrixXd::Identity(n, n);
        for (std::size_t j = 0; j < z_.size(); ++j) {
            s.noalias() += sigma(static_cast<Eigen::Index>(j)) * zzt_[j];
        }
        return s;
    }

    /// C = Sigma^-1 - Sigma^-1 X (X' Sigma^-1 X)^-1 X' Sigma^-1 plus log
    /// determinants. Throws NumericalError on non-PD Sigma or X'Sigma^-1 X.
    RemlTerms evaluate(const VectorXd& sigma, bool with_derivatives) const {
        if (sigma.size() != n_components()) {
            throw SchemaError("variance vector has wrong length");
        }
        const Eigen::Index n = x_.rows();
        Eigen::LLT<MatrixXd> sig_llt(sigma_matrix(sigma));
        if (sig_llt.info() != Eigen::Success) {
            throw NumericalError("Sigma is not positive definite");
        }
        MatrixXd sig_inv = sig_llt.solve(MatrixXd::Identity(n, n));
        MatrixXd w = sig_inv * x_;
        MatrixXd a = x_.transpose() * w;
        Eigen::LLT<MatrixXd> a_llt(a);
        if (a_llt.info() != Eigen::Success) {
            throw NumericalError("X' Sigma^-1 X is singular: fixed model is rank deficient");
        }
        RemlTerms out;
        out.c = sig_inv - w * a_llt.solve(w.transpose());
        const double logdet_sigma = 2.0 * sig_llt.matrixLLT().diagonal().array().log().sum();
        const double logdet_a = 2.0 * a_llt.matrixLLT().diagonal().array().log().sum();
        double quad = 0.0;
        VectorXd cy;
        if (y_ != nullptr) {
            cy = out.c * (*y_);
            quad = y_->dot(cy);
        }
        out.loglik = -0.5 * (logdet_sigma + logdet_a + quad);
        if (!std::isfinite(out.loglik)) {
            throw NumericalError("residual log-likelihood is not finite");
        }
        if (with_derivatives) {
            derivatives(out, cy);
        }
        return out;
    }

private:
    // info_ij = 1/2 tr(C V_i C V_j) = 1/2 ||Z_i' C Z_j||_F^2, with Z = I for
    // the residual component.
    // score_j = -1/2 tr(C V_j) + 1/2 ||Z_j' C y||^2.
    void derivatives(RemlTerms& t, const VectorXd& cy) const {
        const int s = static_cast<int>(z_.size());
        const int k = s + 1;
        std::vector<MatrixXd> cz(s);
        for (int j = 0; j < s; ++j) {
            cz[j] = t.c * z_[j];
        }
        t.info.resize(k, k);
        t.score.resize(k);
        for (int i = 0; i < s; ++i) {
            for (int j = i; j < s; ++j) {
                const double v = 0.5 * (z_[i].transpose() * cz[j]).squaredNorm();
                t.info(i, j) = v;
                t.info(j, i) = v;
            }
            const double v = 0.5 * cz[i].squaredNorm();
            t.info(i, s) = v;
            t.info(s, i) = v;
        }
        t.info(s, s) = 0.5 * t.c.squaredNorm();
        if (y_ != nullptr) {
            for (int j = 0; j < s; ++j) {
                const double tr = (z_[j].transpose() * cz[j]).trace();
                t.score(j) = -0.5 * tr + 0.5 * (z_[j].transpose() * cy).squaredNorm();
            }
            t.score(s) = -0.5 * t.c.trace() + 0.5 * cy.squaredNorm();
        } else {
            t.score.setZero();
        }
    }

    const MatrixXd& x_;
    const std::vector<MatrixXd>& z_;
    const VectorXd* y_;
    std::vector<MatrixXd> zzt_;
};

inline void check_fixed_model(const MatrixXd& x, const std::vector<MatrixXd>& z, const VectorXd& y) {
    if (x.rows() != y.size()) {
        throw SchemaError("fixed model has " + std::to_string(x.rows()) + " rows but response has " +
                          std::to_string(y.size()) + " entries");
    }
    if (linalg::rank(x) != x.cols()) {
        throw NumericalError("fixed model matrix is not of full column rank");
    }
    if (!y.allFinite()) {
        throw SchemaError("response contains non-finite values");
    }
    (void)z;
}

}  // namespace detail

/// Residual log-likelihood of y at `sigma`, up to an additive constant:
///   -1/2 [ log det Sigma + log det(X' Sigma^-1 X) + y' C y ].
/// Invariant to the choice of error contrasts and to y -> y + X a.
inline double reml_criterion(const VectorXd& sigma, const MatrixXd& x, const std::vector<MatrixXd>& z,
                             const VectorXd& y) {
    detail::check_fixed_model(x, z, y);
    if ((sigma.array() < 0.0).any() || sigma(sigma.size() - 1) <= 0.0) {
        throw NumericalError("variance components must be nonnegative with sigma^2 > 0");
    }
    return detail::RemlEvaluator(x, z, &y).evaluate(sigma, false).loglik;
}

/// Gradient of reml_criterion with respect to the variance components.
inline VectorXd reml_score(const VectorXd& sigma, const MatrixXd& x, const std::vector<MatrixXd>& z,
                           const VectorXd& y) {
    detail::check_fixed_model(x, z, y);
    return detail::RemlEvaluator(x, z, &y).evaluate(sigma, true).score;
}

/// Expected information of the residual likelihood, info_ij = 1/2 tr(C V_i C V_j).
struct FisherInfo {
    MatrixXd info;
    MatrixXd u_matrix;
};

/// Expected information and its inverse. Throws InfeasibleError when the
/// information is singular (components not identifiable).
inline FisherInfo fisher_info(const VectorXd& sigma, const MatrixXd& x, const std::vector<MatrixXd>& z) {
    if (sigma(sigma.size() - 1) <= 0.0 || (sigma.array() < 0.0).any()) {
        throw NumericalError("fisher_info requires nonnegative components and sigma^2 > 0");
    }
    detail::RemlEvaluator ev(x, z, nullptr);
    FisherInfo out;
    out.info = ev.evaluate(sigma, true).info;
    Eigen::FullPivLU<MatrixXd> lu(out.info);
    lu.setThreshold(linalg::kRankTolerance);
    if (!lu.isInvertible()) {
        throw InfeasibleError("information matrix is singular: variance components are not identifiable");
    }
    out.u_matrix = linalg::symmetrize(lu.inverse());
    return out;
}

namespace detail {

/// Minimal Nelder-Mead maximizer used as a fallback when scoring stalls.
template <class F>
VectorXd nelder_mead_maximize(F&& f, VectorXd start, double step, int max_evals, double tol) {
    const Eigen::Index d = start.size();
    std::vector<VectorXd> pts(d + 1, start);
    std::vector<double> vals(d + 1);
    for (Eigen::Index i = 0; i < d; ++i) {
        pts[i + 1](i) += step;
    }
    for (Eigen::Index i = 0; i <= d; ++i) {
        vals[i] = f(pts[i]);
    }
    int evals = static_cast<int>(d + 1);
    std::vector<Eigen::Index> order(d + 1);
    while (evals < max_evals) {
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return vals[a] > vals[b]; });
        const auto best = order.front();
        const auto worst = order.back();
        const auto second = order[d - 1 >= 0 ? d - 1 : 0];
        if (std::abs(vals[best] - vals[worst]) <= tol * (std::abs(vals[best]) + 1.0)) {
            double spread = 0.0;
            for (const auto& p : pts) {
                spread = std::max(spread, (p - pts[best]).lpNorm<Eigen::Infinity>());
            }
            if (spread < 1e-10) {
                break;
            }
        }
        VectorXd centroid = VectorXd::Zero(d);
        for (Eigen::Index i = 0; i <= d; ++i) {
            if (i != worst) {
                centroid += pts[i];
            }
        }
        centroid /= static_cast<double>(d);
        VectorXd refl = centroid + (centroid - pts[worst]);
        const double fr = f(refl);
        ++evals;
        if (fr > vals[best]) {
            VectorXd exp = centroid + 2.0 * (centroid - pts[worst]);
            const double fe = f(exp);
            ++evals;
            if (fe > fr) {
                pts[worst] = exp;
                vals[worst] = fe;
            } else {
                pts[worst] = refl;
                vals[worst] = fr;
            }
        } else if (fr > vals[second]) {
            pts[worst] = refl;
            vals[worst] = fr;
        } else {
            VectorXd con = centroid + 0.5 * (pts[worst] - centroid);
            const double fc = f(con);
            ++evals;
            if (fc > vals[worst]) {
                pts[worst] = con;
                vals[worst] = fc;
            } else {
                for (Eigen::Index i = 0; i <= d; ++i) {
                    if (i != best) {
                        pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
                        vals[i] = f(pts[i]);
                        ++evals;
                    }
                }
            }
        }
    }
    const auto best = static_cast<Eigen::Index>(std::max_element(vals.begin(), vals.end()) - vals.begin());
    return pts[best];
}

/// Method-of-moments style starting values from OLS residuals: the residual
/// variance, then for each stratum (innermost first) the spread of unit means
/// less what the inner components already explain.
inline VectorXd starting_values(const MatrixXd& x, const std::vector<MatrixXd>& z, const VectorXd& y,
                                double floor_ratio) {
    const Eigen::Index n = y.size();
    const int s = static_cast<int>(z.size());
    const VectorXd r = linalg::residual_maker(x) * y;
    const double df = static_cast<double>(n - linalg::rank(x));
    const double total = r.squaredNorm() / std::max(df, 1.0);
    const double floor = floor_ratio * std::max(total, std::numeric_limits<double>::min());

    VectorXd sigma(s + 1);
    // Innermost: deviations from the innermost unit means.
    VectorXd inner_dev = r;
    if (s > 0) {
        const MatrixXd& zi = z.back();
        const VectorXd counts = zi.colwise().sum().transpose();
        const VectorXd means = (zi.transpose() * r).cwiseQuotient(counts);
        inner_dev = r - zi * means;
    }
    const double within_df = static_cast<double>(n - (s > 0 ? z.back().cols() : 0));
    sigma(s) = std::max(inner_dev.squaredNorm() / std::max(within_df, 1.0), floor);
    double explained = sigma(s);
    for (int j = s - 1; j >= 0; --j) {
        const VectorXd counts = z[j].colwise().sum().transpose();
        const VectorXd means = (z[j].transpose() * r).cwiseQuotient(counts);
        const double mean_size = static_cast<double>(n) / static_cast<double>(z[j].cols());
        const double spread =
            (means.array() - means.mean()).square().sum() / std::max<double>(1.0, means.size() - 1.0);
        sigma(j) = std::max(spread - explained / mean_size, floor);
        explained += mean_size * sigma(j);
    }
    return sigma;
}

struct ScoringOutcome {
    VectorXd sigma;
    double loglik = 0.0;
    int iterations = 0;
    bool used_nelder_mead = false;
};

/// Fisher scoring in log-variance coordinates over the free components, with
/// step halving, boundary clamping and a KKT release check for clamped ones.
inline ScoringOutcome maximize(const RemlEvaluator& ev, VectorXd sigma, const RemlOptions& opt) {
    const int k = ev.n_components();
    const int resid = k - 1;
    std::vector<bool> free(k, true);
    for (int j = 0; j < resid; ++j) {
        if (sigma(j) <= 0.0) {
            free[j] = false;
            sigma(j) = 0.0;
        }
    }
    ScoringOutcome out;
    int releases = 0;
    int failed = 0;
    int slow = 0;
    double previous_step = std::numeric_limits<double>::infinity();
    RemlTerms cur = ev.evaluate(sigma, true);

    auto free_indices = [&] {
        std::vector<int> idx;
        for (int j = 0; j < k; ++j) {
            if (free[j]) {
                idx.push_back(j);
            }
        }
        return idx;
    };

    auto clamp_small = [&](VectorXd& s) {
        bool clamped = false;
        for (int j = 0; j < resid; ++j) {
            if (free[j] && s(j) < opt.boundary_ratio * s(resid)) {
                s(j) = 0.0;
                free[j] = false;
                clamped = true;
            }
        }
        return clamped;
    };

    while (true) {
        if (out.iterations >= opt.max_iterations) {
            throw ConvergenceError("REML did not converge within " + std::to_string(opt.max_iterations) +
                                       " iterations",
                                   sigma, cur.score.norm());
        }
        ++out.iterations;
        const std::vector<int> idx = free_indices();
        const Eigen::Index m = static_cast<Eigen::Index>(idx.size());
        MatrixXd info(m, m);
        VectorXd grad(m);
        for (Eigen::Index a = 0; a < m; ++a) {
            grad(a) = cur.score(idx[a]);
            for (Eigen::Index b = 0; b < m; ++b) {
                info(a, b) = cur.info(idx[a], idx[b]);
            }
        }
        Eigen::LDLT<MatrixXd> ldlt(info);
        VectorXd step_sigma = ldlt.solve(grad);
        if (ldlt.info() != Eigen::Success || !step_sigma.allFinite()) {
            throw InfeasibleError("information matrix is singular: variance components are not identifiable");
        }
        // Scoring converges only linearly where the expected information
        // overstates the curvature; a run of slowly shrinking steps switches
        // to Newton steps on the observed information (central differences of
        // the analytic score) whenever that matrix is positive definite.
        if (slow >= 5) {
            MatrixXd observed(m, m);
            for (Eigen::Index b = 0; b < m; ++b) {
                const double h = 1e-5 * sigma(idx[b]);
                VectorXd up = sigma, down = sigma;
                up(idx[b]) += h;
                down(idx[b]) -= h;
                try {
                    const VectorXd diff = (ev.evaluate(up, true).score - ev.evaluate(down, true).score) / (2.0 * h);
                    for (Eigen::Index a = 0; a < m; ++a) {
                        observed(a, b) = -diff(idx[a]);
                    }
                } catch (const NumericalError&) {
                    observed.setConstant(std::numeric_limits<double>::quiet_NaN());
                    break;
                }
            }
            observed = linalg::symmetrize(observed);
            Eigen::LLT<MatrixXd> llt(observed);
            if (observed.allFinite() && llt.info() == Eigen::Success) {
                const VectorXd newton = llt.solve(grad);
                if (newton.allFinite()) {
                    step_sigma = newton;
                }
            }
        }
        VectorXd step_log(m);
        for (Eigen::Index a = 0; a < m; ++a) {
            step_log(a) = step_sigma(a) / sigma(idx[a]);
        }
        const double biggest = step_log.lpNorm<Eigen::Infinity>();
        if (biggest > opt.max_log_step) {
            step_log *= opt.max_log_step / biggest;
        }

        const bool negligible_gain = 0.5 * grad.dot(step_sigma) < 1e-12 * (std::abs(cur.loglik) + 1.0);
        bool accepted = false;
        VectorXd trial = sigma;
        RemlTerms next;
        double scale = 1.0;
        for (int h = 0; h < 40; ++h, scale *= 0.5) {
            trial = sigma;
            for (Eigen::Index a = 0; a < m; ++a) {
                trial(idx[a]) = sigma(idx[a]) * std::exp(scale * step_log(a));
            }
            try {
                next = ev.evaluate(trial, true);
            } catch (const NumericalError&) {
                continue;
            }
            // Within the local quadratic regime, or when the predicted gain is
            // below rounding, the full scoring step is taken even if the
            // evaluated criterion does not increase.
            if (next.loglik >= cur.loglik || (h == 0 && (biggest < 1e-4 || negligible_gain))) {
                accepted = true;
                break;
            }
        }

        const double rel_param = step_log.lpNorm<Eigen::Infinity>();
        if (!accepted) {
            // No ascent direction left at machine precision: treat tiny steps
            // as convergence, otherwise count a failure.
            if (biggest < opt.parameter_tolerance) {
                accepted = false;
            } else if (++failed >= opt.max_failed_steps) {
                auto f = [&](const VectorXd& theta) {
                    VectorXd s = sigma;
                    for (Eigen::Index a = 0; a < m; ++a) {
                        s(idx[a]) = std::exp(theta(a));
                    }
                    try {
                        return ev.evaluate(s, false).loglik;
                    } catch (const NumericalError&) {
                        return -std::numeric_limits<double>::infinity();
                    }
                };
                VectorXd theta(m);
                for (Eigen::Index a = 0; a < m; ++a) {
                    theta(a) = std::log(sigma(idx[a]));
                }
                theta = nelder_mead_maximize(f, theta, 0.5, 4000, 1e-14);
                for (Eigen::Index a = 0; a < m; ++a) {
                    sigma(idx[a]) = std::exp(theta(a));
                }
                out.used_nelder_mead = true;
                failed = 0;
                clamp_small(sigma);
                cur = ev.evaluate(sigma, true);
                continue;
            } else {
                continue;
            }
        }

        if (slow < 5) {
            slow = accepted && scale == 1.0 && biggest > 0.5 * previous_step ? slow + 1 : 0;
        }
        previous_step = biggest;
        bool converged;
        if (accepted) {
            failed = 0;
            const double rel_crit = std::abs(next.loglik - cur.loglik) / (std::abs(cur.loglik) + 1.0);
            converged = rel_crit < opt.criterion_tolerance && rel_param < opt.parameter_tolerance;
            sigma = trial;
            cur = std::move(next);
            if (clamp_small(sigma)) {
                cur = ev.evaluate(sigma, true);
                continue;
            }
        } else {
            converged = true;
        }
        if (!converged) {
            continue;
        }

        // KKT check: release a clamped component whose score is positive at 0.
        int release = -1;
        double best = 0.0;
        for (int j = 0; j < resid; ++j) {
            const double g = cur.score(j) * sigma(resid);
            if (!free[j] && g > 1e-6 && g > best) {
                best = g;
                release = j;
            }
        }
        if (release >= 0 && releases < 2 * k) {
            ++releases;
            for (double frac : {1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-6}) {
                VectorXd s = sigma;
                s(release) = frac * sigma(resid);
                RemlTerms t = ev.evaluate(s, true);
                if (t.loglik > cur.loglik) {
                    sigma = s;
                    cur = std::move(t);
                    free[release] = true;
                    break;
                }
            }
            if (free[release]) {
                continue;
            }
        }
        break;
    }
    out.sigma = sigma;
    out.loglik = cur.loglik;
    return out;
}

}  // namespace detail

/// Maximizes the residual likelihood over the nonnegative orthant.
///
/// Starting values come from stratum-wise moment estimates. Components that
/// reach the boundary are set to exactly zero and flagged. `u_matrix` is the
/// inverse expected information at the optimum; when the information is
/// singular there (possible only with a boundary flag) it is left empty.
inline VarianceEstimate fit_reml(const MatrixXd& x, const std::vector<MatrixXd>& z, const VectorXd& y,
                                 const RemlOptions& options = {}) {
    detail::check_fixed_model(x, z, y);
    const int k = static_cast<int>(z.size()) + 1;
    const int df = static_cast<int>(x.rows() - x.cols());
    if (df < k) {
        throw InfeasibleError("residual degrees of freedom (" + std::to_string(df) +
                              ") are fewer than the number of variance components (" + std::to_string(k) + ")");
    }
    detail::RemlEvaluator ev(x, z, &y);
    const VectorXd start = detail::starting_values(x, z, y, options.start_floor);
    if (start(k - 1) <= 0.0) {
        throw NumericalError("response has no residual variation");
    }

    std::vector<VectorXd> starts{start};
    if (options.multi_start) {
        for (double f : {4.0, 0.25}) {
            VectorXd s = start;
            s.head(k - 1) *= f;
            s(k - 1) /= std::sqrt(f);
            starts.push_back(s);
        }
    }
    detail::ScoringOutcome best;
    bool have = false;
    int total_iterations = 0;
    for (const auto& s0 : starts) {
        detail::ScoringOutcome o = detail::maximize(ev, s0, options);
        total_iterations += o.iterations;
        if (!have || o.loglik > best.loglik) {
            best = o;
            have = true;
        }
    }

    VarianceEstimate est;
    est.sigma = best.sigma;
    est.reml_loglik = best.loglik;
    est.iterations = total_iterations;
    est.used_nelder_mead = best.used_nelder_mead;
    est.fixed_model_tag = options.fixed_model_tag;
    est.residual_df = df;
    est.boundary_flags.assign(k, false);
    for (int j = 0; j + 1 < k; ++j) {
        est.boundary_flags[j] = est.sigma(j) == 0.0;
    }
    est.gamma = est.sigma.head(k - 1) / est.residual_variance();
    const detail::RemlTerms t = ev.evaluate(est.sigma, true);
    est.info_matrix = t.info;
    VectorXd free_score = t.score;
    for (int j = 0; j + 1 < k; ++j) {
        if (est.boundary_flags[j]) {
            free_score(j) = 0.0;
        }
    }
    est.gradient_norm = free_score.norm();
    Eigen::FullPivLU<MatrixXd> lu(t.info);
    lu.setThreshold(linalg::kRankTolerance);
    if (lu.isInvertible()) {
        est.u_matrix = linalg::symmetrize(lu.inverse());
    } else if (!est.any_block_on_boundary()) {
        throw InfeasibleError("information matrix is singular at the REML optimum");
    }
    return est;
}

}  // namespace pereml
