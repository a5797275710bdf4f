#pragma once

// CSV datasets, JSON scenario files and report emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pereml/analysis.hpp"
#include "pereml/design.hpp"
#include "pereml/errors.hpp"
#include "pereml/simulation.hpp"

namespace pereml::io {

using nlohmann::json;

struct DatasetConfig {
    /// Stratum column names, outermost first.
    std::vector<std::string> strata;
    std::string response = "y";
    double treatment_tolerance = 0.0;
    bool allow_crossed = false;
};

struct Dataset {
    MultiStratumDesign design;
    VectorXd y;
    std::vector<std::string> factor_names;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

inline double parse_number(const std::string& cell, int line, const std::string& column) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(cell, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (cell.empty() || used != cell.size() || !std::isfinite(v)) {
        throw SchemaError("line " + std::to_string(line) + ": column '" + column + "': '" + cell +
                          "' is not a number");
    }
    return v;
}

}  // namespace detail

/// Reads a comma-separated dataset with a header row. Factor columns are the
/// ones named x1..xq; other columns not named as strata or response are ignored.
inline Dataset parse_dataset(std::istream& in, const DatasetConfig& config) {
    std::string line;
    int line_no = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") != std::string::npos) {
            header = detail::split_csv_line(line);
            break;
        }
    }
    if (header.empty()) {
        throw SchemaError("missing header row");
    }
    if (!header.empty() && header[0].size() >= 3 && header[0].compare(0, 3, "\xEF\xBB\xBF") == 0) {
        header[0] = header[0].substr(3);
    }
    auto find_col = [&](const std::string& name) -> int {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw SchemaError("line " + std::to_string(line_no) + ": missing column '" + name + "'");
        }
        return static_cast<int>(it - header.begin());
    };
    std::vector<int> stratum_cols;
    for (const auto& s : config.strata) {
        stratum_cols.push_back(find_col(s));
    }
    const int y_col = find_col(config.response);
    const std::regex factor_re("x([0-9]+)");
    std::map<int, int> factor_cols;
    for (std::size_t c = 0; c < header.size(); ++c) {
        std::smatch m;
        if (std::regex_match(header[c], m, factor_re)) {
            factor_cols[std::stoi(m[1].str())] = static_cast<int>(c);
        }
    }
    if (factor_cols.empty()) {
        throw SchemaError("line " + std::to_string(line_no) + ": no factor columns (x1, x2, ...)");
    }
    const int q = static_cast<int>(factor_cols.size());
    for (int r = 1; r <= q; ++r) {
        if (!factor_cols.count(r)) {
            throw SchemaError("line " + std::to_string(line_no) + ": missing column 'x" + std::to_string(r) + "'");
        }
    }

    std::vector<std::vector<double>> rows;
    std::vector<double> ys;
    std::vector<std::vector<std::string>> labels(config.strata.size());
    std::vector<int> row_lines;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw SchemaError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                              " cells, found " + std::to_string(cells.size()));
        }
        std::vector<double> row(q);
        for (int r = 1; r <= q; ++r) {
            const int c = factor_cols[r];
            row[r - 1] = detail::parse_number(cells[c], line_no, header[c]);
        }
        ys.push_back(detail::parse_number(cells[y_col], line_no, header[y_col]));
        for (std::size_t j = 0; j < stratum_cols.size(); ++j) {
            const auto& cell = cells[stratum_cols[j]];
            if (cell.empty()) {
                throw SchemaError("line " + std::to_string(line_no) + ": column '" + config.strata[j] +
                                  "' is empty");
            }
            labels[j].push_back(cell);
        }
        rows.push_back(std::move(row));
        row_lines.push_back(line_no);
    }
    if (rows.empty()) {
        throw SchemaError("no runs");
    }
    const auto n = static_cast<Eigen::Index>(rows.size());
    MatrixXd f(n, q);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < q; ++c) {
            f(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
        }
    }
    std::vector<std::vector<int>> units;
    for (const auto& lab : labels) {
        std::map<std::string, int> seen;
        std::vector<int> u;
        for (const auto& l : lab) {
            u.push_back(seen.emplace(l, static_cast<int>(seen.size())).first->second);
        }
        units.push_back(std::move(u));
    }
    Dataset ds;
    try {
        ds.design = MultiStratumDesign(std::move(f), std::move(units), config.strata, config.allow_crossed);
    } catch (const NestingError& e) {
        throw NestingError("line " + std::to_string(row_lines[e.run()]) + ": " + e.what(), e.run(), e.stratum());
    }
    ds.y = Eigen::Map<const VectorXd>(ys.data(), n);
    for (int r = 1; r <= q; ++r) {
        ds.factor_names.push_back("x" + std::to_string(r));
    }
    return ds;
}

inline Dataset parse_dataset(const std::filesystem::path& path, const DatasetConfig& config) {
    std::ifstream in(path);
    if (!in) {
        throw SchemaError("cannot open dataset '" + path.string() + "'");
    }
    try {
        return parse_dataset(in, config);
    } catch (const NestingError& e) {
        throw NestingError(path.string() + ": " + e.what(), e.run(), e.stratum());
    } catch (const SchemaError& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

/// Writes a dataset that parse_dataset reads back exactly (17 significant digits).
inline void write_dataset(std::ostream& out, const MultiStratumDesign& design, const VectorXd& y) {
    const auto& names = design.stratum_names();
    std::vector<std::string> cols(names.begin(), names.end());
    for (int r = 1; r <= design.n_factors(); ++r) {
        cols.push_back("x" + std::to_string(r));
    }
    cols.emplace_back("y");
    for (std::size_t c = 0; c < cols.size(); ++c) {
        out << (c ? "," : "") << cols[c];
    }
    out << '\n';
    out << std::setprecision(17);
    for (int i = 0; i < design.n_runs(); ++i) {
        for (int j = 0; j < design.n_strata(); ++j) {
            out << design.stratum_assignments()[j][i] + 1 << ',';
        }
        for (int c = 0; c < design.n_factors(); ++c) {
            out << design.factor_levels()(i, c) << ',';
        }
        out << y(i) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Scenario files

struct Scenario {
    GeneratorSpec spec;
    std::vector<VarianceSource> methods{VarianceSource::PeReml, VarianceSource::RsReml};
    bool kr = true;
};

inline VarianceSource parse_method(const std::string& s) {
    if (s == "pe-reml") {
        return VarianceSource::PeReml;
    }
    if (s == "rs-reml") {
        return VarianceSource::RsReml;
    }
    throw SchemaError("unknown method '" + s + "' (expected pe-reml or rs-reml)");
}

inline const char* method_key(VarianceSource v) {
    return v == VarianceSource::PeReml ? "pe-reml" : v == VarianceSource::RsReml ? "rs-reml" : "other";
}

/// Loads a scenario. The design path is resolved relative to the scenario file.
inline Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw SchemaError("cannot open scenario '" + path.string() + "'");
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError(path.string() + ": invalid JSON: " + e.what());
    }
    auto field = [&](const char* name) -> const json& {
        if (!j.contains(name)) {
            throw SchemaError(path.string() + ": missing field '" + name + "'");
        }
        return j.at(name);
    };
    Scenario sc;
    try {
        sc.spec.name = j.value("name", path.stem().string());
        DatasetConfig dc;
        dc.strata = field("strata").get<std::vector<std::string>>();
        dc.response = j.value("response", std::string("y"));
        const auto design_path = path.parent_path() / field("design").get<std::string>();
        sc.spec.design = parse_dataset(design_path, dc).design;
        sc.spec.beta_true = field("beta_true").get<std::map<std::string, double>>();
        if (j.contains("extra_terms")) {
            sc.spec.extra_terms = j.at("extra_terms").get<std::map<std::string, double>>();
        }
        const auto sig = field("sigma_true").get<std::vector<double>>();
        sc.spec.sigma_true = Eigen::Map<const VectorXd>(sig.data(), static_cast<Eigen::Index>(sig.size()));
        sc.spec.seed = j.value("seed", std::uint64_t{1});
        sc.spec.n_replicates = j.value("n_replicates", 10000);
        if (j.contains("methods")) {
            sc.methods.clear();
            for (const auto& m : j.at("methods")) {
                sc.methods.push_back(parse_method(m.get<std::string>()));
            }
        }
        sc.kr = j.value("kr", true);
        if (j.value("many_small_terms", false)) {
            sc.spec = many_small_terms_scenario(std::move(sc.spec));
        }
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    const int q = sc.spec.design.n_factors();
    for (const auto& [key, value] : sc.spec.extra_terms) {
        parse_term_key(key, q);
    }
    const auto names = second_order_names(q);
    for (const auto& [name, value] : sc.spec.beta_true) {
        if (std::find(names.begin(), names.end(), name) == names.end()) {
            throw SchemaError(path.string() + ": unknown coefficient '" + name + "' in beta_true");
        }
    }
    if (sc.spec.sigma_true.size() != sc.spec.design.n_strata() + 1) {
        throw SchemaError(path.string() + ": sigma_true needs " + std::to_string(sc.spec.design.n_strata() + 1) +
                          " entries");
    }
    return sc;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline json to_json(const VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        a.push_back(std::isfinite(v(i)) ? json(v(i)) : json(nullptr));
    }
    return a;
}

inline json to_json(const MatrixXd& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        a.push_back(to_json(VectorXd(m.row(i).transpose())));
    }
    return a;
}

inline std::string fixed4(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
}

}  // namespace detail

inline json fit_report_json(const FitReport& rep) {
    json j;
    j["coefficients"] = rep.coefficient_names;
    j["strata"] = rep.stratum_names;
    j["kr"] = rep.kr;
    j["feasibility"] = {{"n", rep.feasibility.n},
                        {"t", rep.feasibility.t},
                        {"residual_df", rep.feasibility.residual_df},
                        {"stratum_df", rep.feasibility.stratum_df},
                        {"feasible", rep.feasibility.feasible}};
    auto method = [&](const MethodFit& m) {
        json o;
        o["variance_components"] = detail::to_json(m.variance.sigma);
        o["boundary_flags"] = m.variance.boundary_flags;
        o["u_matrix"] = detail::to_json(m.variance.u_matrix);
        o["reml_loglik"] = m.variance.reml_loglik;
        o["residual_df"] = m.variance.residual_df;
        o["iterations"] = m.variance.iterations;
        o["estimate"] = detail::to_json(m.fixed.beta_hat);
        o["se"] = detail::to_json(m.fixed.se_unadjusted);
        o["se_kr"] = detail::to_json(m.fixed.se_kr);
        o["kr_applied"] = m.fixed.kr_applied;
        o["warnings"] = m.fixed.warnings;
        return o;
    };
    if (rep.rs) {
        j["rs-reml"] = method(*rep.rs);
    }
    if (rep.pe) {
        j["pe-reml"] = method(*rep.pe);
    }
    return j;
}

namespace detail {

struct Column {
    std::string header;
    const VectorXd* values;
};

inline std::vector<Column> fit_columns(const FitReport& rep) {
    std::vector<Column> cols;
    if (rep.rs) {
        cols.push_back({"est_rs_reml", &rep.rs->fixed.beta_hat});
    }
    if (rep.pe) {
        cols.push_back({"est_pe_reml", &rep.pe->fixed.beta_hat});
    }
    if (rep.rs) {
        cols.push_back({"se_rs_reml", &rep.rs->fixed.se_unadjusted});
    }
    if (rep.pe) {
        cols.push_back({"se_pe_reml", &rep.pe->fixed.se_unadjusted});
    }
    if (rep.kr && rep.rs) {
        cols.push_back({"se_rs_reml_kr", &rep.rs->fixed.se_kr});
    }
    if (rep.kr && rep.pe) {
        cols.push_back({"se_pe_reml_kr", &rep.pe->fixed.se_kr});
    }
    return cols;
}

}  // namespace detail

inline void write_fit_csv(std::ostream& out, const FitReport& rep) {
    const auto cols = detail::fit_columns(rep);
    out << "parameter";
    for (const auto& c : cols) {
        out << ',' << c.header;
    }
    out << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < rep.coefficient_names.size(); ++i) {
        out << rep.coefficient_names[i];
        for (const auto& c : cols) {
            out << ',' << (*c.values)(static_cast<Eigen::Index>(i));
        }
        out << '\n';
    }
}

/// Console table rounded to four decimals, mirroring the usual
/// estimate / standard error / KR standard error layout.
inline void write_fit_text(std::ostream& out, const FitReport& rep) {
    const auto cols = detail::fit_columns(rep);
    auto label = [](const std::string& h) {
        static const std::map<std::string, std::string> names{
            {"est_rs_reml", "Est RS-REML"},  {"est_pe_reml", "Est PE-REML"},     {"se_rs_reml", "SE RS-REML"},
            {"se_pe_reml", "SE PE-REML"},    {"se_rs_reml_kr", "SE RS-REML-KR"}, {"se_pe_reml_kr", "SE PE-REML-KR"}};
        return names.at(h);
    };
    out << std::left << std::setw(10) << "Parameter";
    for (const auto& c : cols) {
        out << std::right << std::setw(15) << label(c.header);
    }
    out << '\n';
    for (std::size_t i = 0; i < rep.coefficient_names.size(); ++i) {
        out << std::left << std::setw(10) << rep.coefficient_names[i];
        for (const auto& c : cols) {
            out << std::right << std::setw(15) << detail::fixed4((*c.values)(static_cast<Eigen::Index>(i)));
        }
        out << '\n';
    }
    out << "\nVariance components (";
    for (const auto& s : rep.stratum_names) {
        out << s << ", ";
    }
    out << "residual)\n";
    auto comps = [&](const char* name, const MethodFit& m) {
        out << "  " << std::left << std::setw(9) << name;
        for (Eigen::Index j = 0; j < m.variance.sigma.size(); ++j) {
            out << std::right << std::setw(12) << detail::fixed4(m.variance.sigma(j));
            if (m.variance.boundary_flags[static_cast<std::size_t>(j)]) {
                out << '*';
            }
        }
        out << '\n';
    };
    if (rep.rs) {
        comps("RS-REML", *rep.rs);
    }
    if (rep.pe) {
        comps("PE-REML", *rep.pe);
    }
    out << "Pure error: " << rep.feasibility.residual_df << " df after " << rep.feasibility.t << " treatments\n";
}

inline json simulation_json(const SimulationReport& rep) {
    json j;
    j["name"] = rep.name;
    j["n_replicates"] = rep.n_replicates;
    j["seed"] = rep.seed;
    j["kr"] = rep.kr;
    j["coefficients"] = rep.coefficient_names;
    j["beta_true"] = detail::to_json(rep.beta_true);
    j["sigma_true"] = detail::to_json(rep.sigma_true);
    for (const auto& m : rep.methods) {
        json o;
        o["n_ok"] = m.n_ok;
        o["n_failed"] = m.n_failed;
        o["n_boundary"] = m.n_boundary;
        o["boundary_rate"] = m.boundary_rate();
        o["failure_messages"] = m.failure_messages;
        o["mean_sigma"] = detail::to_json(m.mean_sigma);
        o["mc_se_sigma"] = detail::to_json(m.mc_se_sigma);
        o["mean_beta"] = detail::to_json(m.mean_beta);
        o["empirical_se_defined"] = m.empirical_se_defined;
        o["empirical_se"] = detail::to_json(m.empirical_se);
        o["mean_se"] = detail::to_json(m.mean_se_unadjusted);
        o["mean_se_kr"] = detail::to_json(m.mean_se_kr);
        o["rel_bias_se_pct"] = detail::to_json(m.rel_bias_unadjusted_pct);
        o["mc_se_rel_bias_se"] = detail::to_json(m.mc_se_rel_bias_unadjusted);
        o["rel_bias_se_kr_pct"] = detail::to_json(m.rel_bias_kr_pct);
        o["mc_se_rel_bias_se_kr"] = detail::to_json(m.mc_se_rel_bias_kr);
        o["rel_bias_beta_pct"] = detail::to_json(m.rel_bias_beta_pct);
        o["mc_se_rel_bias_beta"] = detail::to_json(m.mc_se_rel_bias_beta);
        j["methods"][method_key(m.method)] = o;
    }
    return j;
}

/// One row per (coefficient, method).
inline void write_simulation_csv(std::ostream& out, const SimulationReport& rep) {
    out << "parameter,method,mean_estimate,empirical_se,mean_se,mean_se_kr,rel_bias_se_pct,mc_se_rel_bias_se,"
           "rel_bias_se_kr_pct,mc_se_rel_bias_se_kr,rel_bias_beta_pct\n";
    out << std::setprecision(17);
    for (std::size_t i = 0; i < rep.coefficient_names.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        for (const auto& m : rep.methods) {
            out << rep.coefficient_names[i] << ',' << method_key(m.method) << ',' << m.mean_beta(r) << ','
                << m.empirical_se(r) << ',' << m.mean_se_unadjusted(r) << ',' << m.mean_se_kr(r) << ','
                << m.rel_bias_unadjusted_pct(r) << ',' << m.mc_se_rel_bias_unadjusted(r) << ','
                << m.rel_bias_kr_pct(r) << ',' << m.mc_se_rel_bias_kr(r) << ',' << m.rel_bias_beta_pct(r) << '\n';
        }
    }
}

inline void write_simulation_text(std::ostream& out, const SimulationReport& rep) {
    out << "Scenario " << rep.name << ": " << rep.n_replicates << " replicates, seed " << rep.seed << "\n\n";
    out << "Mean variance component estimates (MC s.e.)\n";
    for (const auto& m : rep.methods) {
        out << "  " << std::left << std::setw(9) << to_string(m.method);
        for (Eigen::Index j = 0; j < m.mean_sigma.size(); ++j) {
            out << "  " << detail::fixed4(m.mean_sigma(j)) << " (" << detail::fixed4(m.mc_se_sigma(j)) << ")";
        }
        out << "   fitted " << m.n_ok << ", failed " << m.n_failed << ", boundary " << m.n_boundary << '\n';
    }
    if (rep.methods.front().n_ok < 2) {
        out << "\nEmpirical standard errors undefined with fewer than two fitted replicates.\n";
        return;
    }
    auto table = [&](const char* title, auto pick) {
        out << '\n' << title << '\n' << std::left << std::setw(10) << "";
        for (const auto& m : rep.methods) {
            out << std::right << std::setw(12) << to_string(m.method);
        }
        out << '\n';
        for (std::size_t i = 0; i < rep.coefficient_names.size(); ++i) {
            out << std::left << std::setw(10) << rep.coefficient_names[i];
            for (const auto& m : rep.methods) {
                std::ostringstream s;
                s << std::fixed << std::setprecision(2) << pick(m)(static_cast<Eigen::Index>(i));
                out << std::right << std::setw(12) << s.str();
            }
            out << '\n';
        }
    };
    table("Empirical standard errors", [](const MethodSummary& m) -> const VectorXd& { return m.empirical_se; });
    table("Relative biases (%) of uncorrected estimated standard errors",
          [](const MethodSummary& m) -> const VectorXd& { return m.rel_bias_unadjusted_pct; });
    if (rep.kr) {
        table("Relative biases (%) of Kenward-Roger corrected standard errors",
              [](const MethodSummary& m) -> const VectorXd& { return m.rel_bias_kr_pct; });
    }
}

}  // namespace pereml::io
