#pragma once

#include <vector>

#include "pereml/design.hpp"
#include "pereml/reml.hpp"

namespace pereml {

/// Residual dimensions under the full treatment model, and whether the
/// pure-error residual likelihood identifies every variance component.
///
/// Stratum j receives rank([X_t | Z_1..Z_j]) - rank([X_t | Z_1..Z_{j-1}])
/// degrees of freedom; the residual stratum gets what remains of n.
inline FeasibilityReport pure_error_feasibility(const MatrixXd& x_t, const std::vector<MatrixXd>& z) {
    FeasibilityReport rep;
    rep.n = static_cast<int>(x_t.rows());
    rep.t = static_cast<int>(x_t.cols());
    for (const auto& zj : z) {
        if (zj.rows() != x_t.rows()) {
            throw SchemaError("stratum matrix row count differs from treatment matrix row count");
        }
    }
    rep.rank_treatments = static_cast<int>(linalg::rank(x_t));
    rep.residual_df = rep.n - rep.rank_treatments;
    MatrixXd acc = x_t;
    int prev = rep.rank_treatments;
    for (const auto& zj : z) {
        acc = linalg::hcat(acc, zj);
        const int r = static_cast<int>(linalg::rank(acc));
        rep.stratum_df.push_back(r - prev);
        prev = r;
    }
    rep.stratum_df.push_back(rep.n - prev);

    const int k = static_cast<int>(z.size()) + 1;
    if (rep.rank_treatments == rep.t && rep.residual_df >= k) {
        try {
            fisher_info(VectorXd::Ones(k), x_t, z);
            rep.information_nonsingular = true;
        } catch (const NumericalError&) {
            rep.information_nonsingular = false;
        }
    }
    rep.feasible = rep.information_nonsingular;
    return rep;
}

}  // namespace pereml
