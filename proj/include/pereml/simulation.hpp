#pragma once

// Monte Carlo bias studies: simulate responses from the multi-stratum mixed
// model (optionally with third-order terms the fitted polynomial omits), fit
// every replicate by PE-REML and RS-REML, and summarize empirical and
// estimated standard errors.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "pereml/design.hpp"
#include "pereml/errors.hpp"
#include "pereml/gls.hpp"
#include "pereml/kenward_roger.hpp"
#include "pereml/reml.hpp"

namespace pereml {

struct GeneratorSpec {
    std::string name;
    MultiStratumDesign design;
    /// Second-order coefficients by name (beta0, beta1, beta11, beta12, ...);
    /// missing names are zero.
    std::map<std::string, double> beta_true;
    /// Higher-order terms keyed by factor indices: "112" is X1^2 X2, "334"
    /// is X3^2 X4. Indices are joined with '_' when a factor index exceeds 9.
    std::map<std::string, double> extra_terms;
    /// (sigma_1^2, ..., sigma_s^2, sigma^2).
    VectorXd sigma_true;
    std::uint64_t seed = 0;
    int n_replicates = 10000;
};

/// 0-based factor indices of a term key such as "112" or "1_10_10".
inline std::vector<int> parse_term_key(const std::string& key, int q) {
    std::vector<int> idx;
    if (key.empty()) {
        throw SchemaError("empty term key");
    }
    auto push = [&](const std::string& tok) {
        if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
            throw SchemaError("term key '" + key + "' is not a list of factor indices");
        }
        const int v = std::stoi(tok);
        if (v < 1 || v > q) {
            throw SchemaError("term key '" + key + "' references factor " + tok + " but the design has " +
                              std::to_string(q) + " factors");
        }
        idx.push_back(v - 1);
    };
    if (key.find('_') != std::string::npos) {
        std::size_t start = 0;
        while (true) {
            const std::size_t pos = key.find('_', start);
            push(key.substr(start, pos - start));
            if (pos == std::string::npos) {
                break;
            }
            start = pos + 1;
        }
    } else {
        for (char c : key) {
            push(std::string(1, c));
        }
    }
    return idx;
}

/// Checks names and indices and returns the noise-free mean of every run.
inline VectorXd true_mean(const GeneratorSpec& spec) {
    const MatrixXd& f = spec.design.factor_levels();
    const int q = spec.design.n_factors();
    const MatrixXd x = build_second_order_matrix(f);
    const auto names = second_order_names(q);
    VectorXd beta = VectorXd::Zero(x.cols());
    for (const auto& [name, value] : spec.beta_true) {
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) {
            throw SchemaError("unknown coefficient '" + name + "'");
        }
        beta(it - names.begin()) = value;
    }
    VectorXd mu = x * beta;
    for (const auto& [key, value] : spec.extra_terms) {
        VectorXd term = VectorXd::Constant(f.rows(), value);
        for (int c : parse_term_key(key, q)) {
            term = term.cwiseProduct(f.col(c));
        }
        mu += term;
    }
    return mu;
}

namespace detail {

inline std::mt19937_64 replicate_engine(std::uint64_t seed, std::uint64_t replicate) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(replicate), static_cast<std::uint32_t>(replicate >> 32),
                      0x9e3779b9u};
    return std::mt19937_64(seq);
}

inline VectorXd add_noise(const GeneratorSpec& spec, const VectorXd& mu, std::uint64_t replicate) {
    const auto& units = spec.design.stratum_assignments();
    const auto& sizes = spec.design.stratum_sizes();
    auto gen = replicate_engine(spec.seed, replicate);
    std::normal_distribution<double> normal(0.0, 1.0);
    VectorXd y = mu;
    for (int j = 0; j < spec.design.n_strata(); ++j) {
        const double sd = std::sqrt(spec.sigma_true(j));
        std::vector<double> delta(sizes[j]);
        for (double& d : delta) {
            d = sd * normal(gen);
        }
        for (int i = 0; i < spec.design.n_runs(); ++i) {
            y(i) += delta[units[j][i]];
        }
    }
    const double sd = std::sqrt(spec.sigma_true(spec.sigma_true.size() - 1));
    for (int i = 0; i < spec.design.n_runs(); ++i) {
        y(i) += sd * normal(gen);
    }
    return y;
}

inline void validate(const GeneratorSpec& spec) {
    if (spec.sigma_true.size() != spec.design.n_strata() + 1) {
        throw SchemaError("sigma_true needs " + std::to_string(spec.design.n_strata() + 1) + " components");
    }
    if ((spec.sigma_true.array() < 0.0).any()) {
        throw SchemaError("sigma_true components must be nonnegative");
    }
    if (spec.n_replicates < 1) {
        throw SchemaError("n_replicates must be positive");
    }
}

}  // namespace detail

/// y = X beta + extra terms + sum_j Z_j delta_j + eps for one replicate.
/// Each replicate draws from its own engine seeded by (seed, replicate).
inline VectorXd simulate_response(const GeneratorSpec& spec, std::uint64_t replicate) {
    detail::validate(spec);
    return detail::add_noise(spec, true_mean(spec), replicate);
}

/// Adds every X_r^2 X_s (r != s) at 0.5 and every X_r X_s X_t (r < s < t) at
/// 0.25 to the base scenario.
inline GeneratorSpec many_small_terms_scenario(GeneratorSpec base) {
    const int q = base.design.n_factors();
    if (q < 3) {
        throw SchemaError("many-small-terms scenario needs at least three factors");
    }
    auto key = [q](std::initializer_list<int> idx) {
        std::string s;
        for (int v : idx) {
            if (q >= 10 && !s.empty()) {
                s += '_';
            }
            s += std::to_string(v);
        }
        return s;
    };
    for (int r = 1; r <= q; ++r) {
        for (int s = 1; s <= q; ++s) {
            if (r != s) {
                base.extra_terms[key({r, r, s})] = 0.5;
            }
        }
    }
    for (int r = 1; r <= q; ++r) {
        for (int s = r + 1; s <= q; ++s) {
            for (int t = s + 1; t <= q; ++t) {
                base.extra_terms[key({r, s, t})] = 0.25;
            }
        }
    }
    return base;
}

/// Per-method aggregates over the replicates that were fitted successfully.
struct MethodSummary {
    VarianceSource method = VarianceSource::Other;
    int n_ok = 0;
    int n_failed = 0;
    /// Replicates with a blocking component estimated at zero.
    int n_boundary = 0;
    std::vector<std::string> failure_messages;

    VectorXd mean_sigma;
    VectorXd mc_se_sigma;
    VectorXd mean_beta;
    /// Sample standard deviation of beta-hat across replicates (NaN when n_ok < 2).
    VectorXd empirical_se;
    bool empirical_se_defined = false;
    VectorXd mean_se_unadjusted;
    VectorXd mean_se_kr;
    VectorXd rel_bias_unadjusted_pct;
    VectorXd rel_bias_kr_pct;
    VectorXd mc_se_rel_bias_unadjusted;
    VectorXd mc_se_rel_bias_kr;
    VectorXd rel_bias_beta_pct;
    VectorXd mc_se_rel_bias_beta;

    double boundary_rate() const { return n_ok > 0 ? static_cast<double>(n_boundary) / n_ok : 0.0; }
};

struct SimulationReport {
    std::string name;
    int n_replicates = 0;
    std::uint64_t seed = 0;
    bool kr = false;
    std::vector<std::string> coefficient_names;
    VectorXd beta_true;
    VectorXd sigma_true;
    std::vector<MethodSummary> methods;

    const MethodSummary& method(VarianceSource m) const {
        for (const auto& s : methods) {
            if (s.method == m) {
                return s;
            }
        }
        throw SchemaError(std::string("method ") + to_string(m) + " not in report");
    }
};

struct StudyOptions {
    int threads = 1;
    RemlOptions reml;
};

namespace detail {

struct ReplicateFit {
    bool ok = false;
    bool boundary = false;
    VectorXd sigma;
    VectorXd beta;
    VectorXd se;
    VectorXd se_kr;
    std::string error;
};

inline ReplicateFit fit_one(const ModelMatrices& mm, const VectorXd& y, VarianceSource method, bool kr,
                            RemlOptions ro) {
    ReplicateFit r;
    try {
        const bool pe = method == VarianceSource::PeReml;
        ro.fixed_model_tag = pe ? FixedModel::FullTreatment : FixedModel::Polynomial;
        const VarianceEstimate est = fit_reml(pe ? mm.x_t : mm.x, mm.z, y, ro);
        FixedEffectsFit fit = gls_fit(mm.x, mm.z, est, y, method);
        if (kr) {
            apply_kr(fit, est, mm.x, mm.z);
        }
        r.sigma = est.sigma;
        r.beta = fit.beta_hat;
        r.se = fit.se_unadjusted;
        r.se_kr = fit.se_kr;
        r.boundary = est.any_block_on_boundary();
        r.ok = true;
    } catch (const std::exception& e) {
        r.error = e.what();
    }
    return r;
}

inline MethodSummary summarize(VarianceSource method, const std::vector<ReplicateFit>& fits,
                               const VectorXd& beta_true, int k) {
    MethodSummary s;
    s.method = method;
    const Eigen::Index p = beta_true.size();
    VectorXd sum_sigma = VectorXd::Zero(k), sq_sigma = VectorXd::Zero(k);
    VectorXd sum_beta = VectorXd::Zero(p), sq_beta = VectorXd::Zero(p);
    VectorXd sum_se = VectorXd::Zero(p), sq_se = VectorXd::Zero(p);
    VectorXd sum_kr = VectorXd::Zero(p), sq_kr = VectorXd::Zero(p);
    for (const auto& f : fits) {
        if (!f.ok) {
            ++s.n_failed;
            if (s.failure_messages.size() < 5) {
                s.failure_messages.push_back(f.error);
            }
            continue;
        }
        ++s.n_ok;
        s.n_boundary += f.boundary ? 1 : 0;
        sum_sigma += f.sigma;
        sq_sigma += f.sigma.cwiseAbs2();
        sum_beta += f.beta;
        sq_beta += f.beta.cwiseAbs2();
        sum_se += f.se;
        sq_se += f.se.cwiseAbs2();
        sum_kr += f.se_kr;
        sq_kr += f.se_kr.cwiseAbs2();
    }
    if (s.n_ok == 0) {
        throw NumericalError(std::string(to_string(method)) + " failed on every replicate: " +
                             (s.failure_messages.empty() ? std::string("no replicates") : s.failure_messages.front()));
    }
    const double n = s.n_ok;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto sample_var = [&](const VectorXd& sum, const VectorXd& sq) -> VectorXd {
        if (s.n_ok < 2) {
            return VectorXd::Constant(sum.size(), nan);
        }
        return ((sq - sum.cwiseAbs2() / n) / (n - 1.0)).cwiseMax(0.0);
    };
    s.mean_sigma = sum_sigma / n;
    s.mc_se_sigma = (sample_var(sum_sigma, sq_sigma) / n).cwiseSqrt();
    s.mean_beta = sum_beta / n;
    s.empirical_se = sample_var(sum_beta, sq_beta).cwiseSqrt();
    s.empirical_se_defined = s.n_ok >= 2;
    s.mean_se_unadjusted = sum_se / n;
    s.mean_se_kr = sum_kr / n;

    const VectorXd& emp = s.empirical_se;
    s.rel_bias_unadjusted_pct = 100.0 * (s.mean_se_unadjusted - emp).cwiseQuotient(emp);
    s.rel_bias_kr_pct = 100.0 * (s.mean_se_kr - emp).cwiseQuotient(emp);
    s.rel_bias_beta_pct = 100.0 * (s.mean_beta - beta_true).cwiseQuotient(emp);
    s.mc_se_rel_bias_beta = VectorXd::Constant(p, 100.0 / std::sqrt(n));
    // Delta method: mean estimated SE and empirical SE treated as independent,
    // sd(empirical SE) ~ emp / sqrt(2 (n - 1)).
    auto mc_rel = [&](const VectorXd& mean, const VectorXd& sum, const VectorXd& sq) -> VectorXd {
        const VectorXd var_mean = sample_var(sum, sq) / n;
        const VectorXd ratio = mean.cwiseQuotient(emp);
        return 100.0 * (var_mean.cwiseQuotient(emp.cwiseAbs2()) + ratio.cwiseAbs2() / (2.0 * (n - 1.0))).cwiseSqrt();
    };
    s.mc_se_rel_bias_unadjusted = mc_rel(s.mean_se_unadjusted, sum_se, sq_se);
    s.mc_se_rel_bias_kr = mc_rel(s.mean_se_kr, sum_kr, sq_kr);
    return s;
}

}  // namespace detail

/// Fits every replicate with each requested method and aggregates. Results
/// are accumulated in replicate order, so the report does not depend on the
/// thread count. Replicates whose fit fails are counted and excluded.
inline SimulationReport run_bias_study(const GeneratorSpec& spec, const std::vector<VarianceSource>& methods,
                                       bool kr, const StudyOptions& options = {}) {
    detail::validate(spec);
    if (methods.empty()) {
        throw SchemaError("no estimation methods requested");
    }
    const ModelMatrices mm = build_model_matrices(spec.design);
    const VectorXd mu = true_mean(spec);

    SimulationReport rep;
    rep.name = spec.name;
    rep.n_replicates = spec.n_replicates;
    rep.seed = spec.seed;
    rep.kr = kr;
    rep.coefficient_names = mm.coefficient_names;
    rep.sigma_true = spec.sigma_true;
    rep.beta_true = VectorXd::Zero(mm.p);
    for (const auto& [name, value] : spec.beta_true) {
        const auto it = std::find(mm.coefficient_names.begin(), mm.coefficient_names.end(), name);
        rep.beta_true(it - mm.coefficient_names.begin()) = value;
    }

    const std::size_t n_methods = methods.size();
    const auto reps = static_cast<std::size_t>(spec.n_replicates);
    std::vector<std::vector<detail::ReplicateFit>> fits(n_methods, std::vector<detail::ReplicateFit>(reps));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            const std::size_t r = next.fetch_add(1);
            if (r >= reps) {
                break;
            }
            const VectorXd y = detail::add_noise(spec, mu, r);
            for (std::size_t m = 0; m < n_methods; ++m) {
                fits[m][r] = detail::fit_one(mm, y, methods[m], kr, options.reml);
            }
        }
    };
    const int threads = std::max(1, options.threads);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& th : pool) {
            th.join();
        }
    }
    const int k = static_cast<int>(spec.sigma_true.size());
    for (std::size_t m = 0; m < n_methods; ++m) {
        rep.methods.push_back(detail::summarize(methods[m], fits[m], rep.beta_true, k));
    }
    return rep;
}

}  // namespace pereml
