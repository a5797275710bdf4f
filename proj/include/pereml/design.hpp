#pragma once

// Multi-stratum designs and the fixed/random model matrices built from them.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pereml/errors.hpp"
#include "pereml/linalg.hpp"

namespace pereml {

/// Runs with coded factor settings and nested blocking factors.
///
/// `units[j][i]` is the 0-based unit of run i in stratum j. Strata are ordered
/// outermost first (whole plots, then subplots, ...). Raw labels read from a
/// file are recoded to 0..n_j-1 in first-appearance order.
class MultiStratumDesign {
public:
    MultiStratumDesign() = default;

    /// Validates shapes and, unless `allow_crossed`, the nesting invariant.
    MultiStratumDesign(MatrixXd factor_levels,
                       std::vector<std::vector<int>> units,
                       std::vector<std::string> stratum_names = {},
                       bool allow_crossed = false)
        : factor_levels_(std::move(factor_levels)),
          units_(std::move(units)),
          stratum_names_(std::move(stratum_names)),
          crossed_(allow_crossed) {
        const Eigen::Index n = factor_levels_.rows();
        if (n == 0) {
            throw SchemaError("no runs");
        }
        if (factor_levels_.cols() == 0) {
            throw SchemaError("design has no treatment factors");
        }
        if (!factor_levels_.allFinite()) {
            throw SchemaError("factor levels must be finite");
        }
        if (stratum_names_.empty()) {
            for (std::size_t j = 0; j < units_.size(); ++j) {
                stratum_names_.push_back("stratum" + std::to_string(j + 1));
            }
        }
        if (stratum_names_.size() != units_.size()) {
            throw SchemaError("stratum name count does not match stratum count");
        }
        sizes_.reserve(units_.size());
        for (std::size_t j = 0; j < units_.size(); ++j) {
            auto& u = units_[j];
            if (static_cast<Eigen::Index>(u.size()) != n) {
                throw SchemaError("stratum '" + stratum_names_[j] + "' has " + std::to_string(u.size()) +
                                  " labels for " + std::to_string(n) + " runs");
            }
            u = recode(u);
            const int n_j = *std::max_element(u.begin(), u.end()) + 1;
            if (n_j >= n) {
                throw SchemaError("stratum '" + stratum_names_[j] +
                                  "' has as many units as runs and is confounded with the residual");
            }
            sizes_.push_back(n_j);
        }
        if (!allow_crossed) {
            check_nesting();
        }
    }

    /// Convenience factory taking raw (possibly non-contiguous) labels.
    static MultiStratumDesign from_labels(MatrixXd factor_levels,
                                          const std::vector<std::vector<long>>& labels,
                                          std::vector<std::string> stratum_names = {},
                                          bool allow_crossed = false) {
        std::vector<std::vector<int>> units;
        units.reserve(labels.size());
        for (const auto& raw : labels) {
            std::map<long, int> seen;
            std::vector<int> u;
            u.reserve(raw.size());
            for (long v : raw) {
                auto [it, inserted] = seen.emplace(v, static_cast<int>(seen.size()));
                u.push_back(it->second);
            }
            units.push_back(std::move(u));
        }
        return MultiStratumDesign(std::move(factor_levels), std::move(units), std::move(stratum_names),
                                  allow_crossed);
    }

    int n_runs() const { return static_cast<int>(factor_levels_.rows()); }
    int n_factors() const { return static_cast<int>(factor_levels_.cols()); }
    int n_strata() const { return static_cast<int>(units_.size()); }
    const MatrixXd& factor_levels() const { return factor_levels_; }
    const std::vector<std::vector<int>>& stratum_assignments() const { return units_; }
    const std::vector<int>& stratum_sizes() const { return sizes_; }
    const std::vector<std::string>& stratum_names() const { return stratum_names_; }
    bool crossed_allowed() const { return crossed_; }

    /// Units per block in each stratum when every block of every stratum has
    /// the same run count; empty otherwise.
    std::optional<std::vector<int>> balanced_block_sizes() const {
        std::vector<int> out;
        for (int j = 0; j < n_strata(); ++j) {
            std::vector<int> counts(sizes_[j], 0);
            for (int u : units_[j]) {
                ++counts[u];
            }
            if (std::adjacent_find(counts.begin(), counts.end(), std::not_equal_to<>()) != counts.end()) {
                return std::nullopt;
            }
            out.push_back(counts.front());
        }
        return out;
    }

private:
    static std::vector<int> recode(const std::vector<int>& raw) {
        std::map<int, int> seen;
        std::vector<int> out;
        out.reserve(raw.size());
        for (int v : raw) {
            auto [it, inserted] = seen.emplace(v, static_cast<int>(seen.size()));
            out.push_back(it->second);
        }
        return out;
    }

    void check_nesting() const {
        for (int j = 0; j + 1 < n_strata(); ++j) {
            const auto& outer = units_[j];
            const auto& inner = units_[j + 1];
            std::vector<int> parent(sizes_[j + 1], -1);
            for (int i = 0; i < n_runs(); ++i) {
                int& p = parent[inner[i]];
                if (p == -1) {
                    p = outer[i];
                } else if (p != outer[i]) {
                    throw NestingError("run " + std::to_string(i + 1) + ": unit of stratum '" +
                                           stratum_names_[j + 1] + "' spans more than one unit of stratum '" +
                                           stratum_names_[j] + "'",
                                       i, j + 1);
                }
            }
        }
    }

    MatrixXd factor_levels_;
    std::vector<std::vector<int>> units_;
    std::vector<std::string> stratum_names_;
    std::vector<int> sizes_;
    bool crossed_ = false;
};

/// Result of grouping runs into treatments. `labels[i]` is the 0-based
/// treatment (column of X_t) of run i, numbered in first-appearance order.
struct TreatmentCoding {
    std::vector<int> labels;
    int t = 0;

    /// Replication count of every treatment.
    std::vector<int> counts() const {
        std::vector<int> c(t, 0);
        for (int l : labels) {
            ++c[l];
        }
        return c;
    }
};

namespace detail {

inline bool levels_match(const Eigen::Ref<const Eigen::RowVectorXd>& a,
                         const Eigen::Ref<const Eigen::RowVectorXd>& b, double tolerance) {
    for (Eigen::Index c = 0; c < a.size(); ++c) {
        const double scale = std::max({1.0, std::abs(a(c)), std::abs(b(c))});
        if (std::abs(a(c) - b(c)) > tolerance * scale) {
            return false;
        }
    }
    return true;
}

}  // namespace detail

/// Groups runs with equal factor settings into treatments.
///
/// `tolerance` is relative (scaled by max(1, |a|, |b|)); 0 means exact
/// equality. Throws AmbiguousTreatmentError when the tolerance relation is
/// not transitive on the data.
inline TreatmentCoding identify_treatments(const MultiStratumDesign& design, double tolerance = 0.0) {
    if (tolerance < 0.0) {
        throw SchemaError("treatment tolerance must be nonnegative");
    }
    const MatrixXd& f = design.factor_levels();
    TreatmentCoding out;
    out.labels.assign(design.n_runs(), -1);
    std::vector<std::vector<int>> members;
    for (int i = 0; i < design.n_runs(); ++i) {
        int found = -1;
        for (int r = 0; r < out.t; ++r) {
            const bool any = std::any_of(members[r].begin(), members[r].end(), [&](int m) {
                return detail::levels_match(f.row(i), f.row(m), tolerance);
            });
            if (!any) {
                continue;
            }
            const bool all = std::all_of(members[r].begin(), members[r].end(), [&](int m) {
                return detail::levels_match(f.row(i), f.row(m), tolerance);
            });
            if (!all || found != -1) {
                throw AmbiguousTreatmentError("ambiguous treatment coding at run " + std::to_string(i + 1) +
                                              ": tolerance groups settings non-transitively");
            }
            found = r;
        }
        if (found == -1) {
            found = out.t++;
            members.emplace_back();
        }
        members[found].push_back(i);
        out.labels[i] = found;
    }
    return out;
}

/// n x t indicator matrix with X_t(i, r) = 1 iff run i received treatment r.
inline MatrixXd build_full_treatment_matrix(const std::vector<int>& labels, int t) {
    MatrixXd xt = MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), t);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= t) {
            throw SchemaError("treatment label out of range at run " + std::to_string(i + 1));
        }
        xt(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    }
    return xt;
}

inline int second_order_parameter_count(int q) { return 1 + 2 * q + q * (q - 1) / 2; }

namespace detail {

inline std::string index_suffix(std::initializer_list<int> idx, int q) {
    std::string s;
    for (int v : idx) {
        if (q >= 10 && !s.empty()) {
            s += '_';
        }
        s += std::to_string(v);
    }
    return s;
}

}  // namespace detail

/// Coefficient names in column order: beta0, beta1..betaq, beta11..betaqq,
/// then beta_rs for r < s. Indices are joined with '_' when q >= 10.
inline std::vector<std::string> second_order_names(int q) {
    std::vector<std::string> names{"beta0"};
    for (int r = 1; r <= q; ++r) {
        names.push_back("beta" + detail::index_suffix({r}, q));
    }
    for (int r = 1; r <= q; ++r) {
        names.push_back("beta" + detail::index_suffix({r, r}, q));
    }
    for (int r = 1; r <= q; ++r) {
        for (int s = r + 1; s <= q; ++s) {
            names.push_back("beta" + detail::index_suffix({r, s}, q));
        }
    }
    return names;
}

/// Second-order polynomial model matrix: intercept, linear, pure quadratic,
/// then two-factor interactions in lexicographic order.
inline MatrixXd build_second_order_matrix(const MatrixXd& factor_levels) {
    const Eigen::Index n = factor_levels.rows();
    const int q = static_cast<int>(factor_levels.cols());
    MatrixXd x(n, second_order_parameter_count(q));
    x.col(0).setOnes();
    x.middleCols(1, q) = factor_levels;
    x.middleCols(1 + q, q) = factor_levels.array().square().matrix();
    Eigen::Index c = 1 + 2 * q;
    for (int r = 0; r < q; ++r) {
        for (int s = r + 1; s < q; ++s) {
            x.col(c++) = factor_levels.col(r).cwiseProduct(factor_levels.col(s));
        }
    }
    return x;
}

/// One n x n_j 0/1 membership matrix per stratum.
inline std::vector<MatrixXd> build_stratum_matrices(const MultiStratumDesign& design) {
    std::vector<MatrixXd> zs;
    zs.reserve(design.n_strata());
    for (int j = 0; j < design.n_strata(); ++j) {
        MatrixXd z = MatrixXd::Zero(design.n_runs(), design.stratum_sizes()[j]);
        const auto& u = design.stratum_assignments()[j];
        for (int i = 0; i < design.n_runs(); ++i) {
            z(i, u[i]) = 1.0;
        }
        zs.push_back(std::move(z));
    }
    return zs;
}

/// Everything a fit needs, built once per design.
struct ModelMatrices {
    MatrixXd x_t;
    int t = 0;
    MatrixXd x;
    int p = 0;
    std::vector<MatrixXd> z;
    TreatmentCoding treatments;
    std::vector<std::string> coefficient_names;
};

inline ModelMatrices build_model_matrices(const MultiStratumDesign& design, double tolerance = 0.0) {
    ModelMatrices m;
    m.treatments = identify_treatments(design, tolerance);
    m.t = m.treatments.t;
    m.x_t = build_full_treatment_matrix(m.treatments.labels, m.t);
    m.x = build_second_order_matrix(design.factor_levels());
    m.p = static_cast<int>(m.x.cols());
    m.z = build_stratum_matrices(design);
    m.coefficient_names = second_order_names(design.n_factors());
    return m;
}

/// Residual dimensions left by the full treatment model, stratum by stratum.
struct FeasibilityReport {
    int n = 0;
    int t = 0;
    int rank_treatments = 0;
    /// n - rank(X_t): dimension of the residual (pure error) space.
    int residual_df = 0;
    /// Pure-error df attributable to each blocking stratum (outermost first),
    /// followed by the df left for the residual stratum.
    std::vector<int> stratum_df;
    /// PE-REML information matrix nonsingular at sigma = (1, ..., 1).
    bool information_nonsingular = false;
    bool feasible = false;
};

}  // namespace pereml
