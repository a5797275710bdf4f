#pragma once

// One-call analysis of a dataset: PE-REML and/or RS-REML variance
// components, empirical GLS on the second-order model, optional KR.

#include <optional>
#include <string>
#include <vector>

#include "pereml/design.hpp"
#include "pereml/feasibility.hpp"
#include "pereml/gls.hpp"
#include "pereml/kenward_roger.hpp"
#include "pereml/reml.hpp"

namespace pereml {

enum class MethodSet { PeReml, RsReml, Both };

struct MethodFit {
    VarianceSource method = VarianceSource::Other;
    VarianceEstimate variance;
    FixedEffectsFit fixed;
};

struct FitReport {
    std::vector<std::string> coefficient_names;
    std::vector<std::string> stratum_names;
    FeasibilityReport feasibility;
    bool kr = false;
    std::optional<MethodFit> rs;
    std::optional<MethodFit> pe;
};

inline MethodFit fit_method(const ModelMatrices& mm, const VectorXd& y, VarianceSource method, bool kr,
                            RemlOptions options = {}) {
    const bool pe = method == VarianceSource::PeReml;
    options.fixed_model_tag = pe ? FixedModel::FullTreatment : FixedModel::Polynomial;
    MethodFit out;
    out.method = method;
    out.variance = fit_reml(pe ? mm.x_t : mm.x, mm.z, y, options);
    out.fixed = gls_fit(mm.x, mm.z, out.variance, y, method);
    out.fixed.coefficient_names = mm.coefficient_names;
    if (kr) {
        apply_kr(out.fixed, out.variance, mm.x, mm.z);
    }
    return out;
}

/// Throws InfeasibleError("PE-REML infeasible: ...") when pure error cannot
/// identify the variance components.
inline FitReport analyze(const MultiStratumDesign& design, const VectorXd& y, MethodSet methods, bool kr,
                         const RemlOptions& options = {}, double treatment_tolerance = 0.0) {
    const ModelMatrices mm = build_model_matrices(design, treatment_tolerance);
    FitReport rep;
    rep.coefficient_names = mm.coefficient_names;
    rep.stratum_names = design.stratum_names();
    rep.kr = kr;
    rep.feasibility = pure_error_feasibility(mm.x_t, mm.z);
    if (methods != MethodSet::RsReml) {
        if (!rep.feasibility.feasible) {
            throw InfeasibleError("PE-REML infeasible: no pure error degrees of freedom");
        }
        rep.pe = fit_method(mm, y, VarianceSource::PeReml, kr, options);
    }
    if (methods != MethodSet::PeReml) {
        rep.rs = fit_method(mm, y, VarianceSource::RsReml, kr, options);
    }
    return rep;
}

}  // namespace pereml
