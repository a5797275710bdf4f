// pereml: fit, simulate and check split-plot response surface datasets.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "pereml/pereml.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kNumerical = 3 };

std::vector<std::string> split_names(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string part;
    while (std::getline(in, part, ',')) {
        if (!part.empty()) {
            out.push_back(part);
        }
    }
    return out;
}

struct FitArgs {
    std::string data;
    std::string strata;
    std::string method = "both";
    bool kr = false;
    std::string out;
    std::string format = "text";
    double tolerance = 0.0;
};

struct SimulateArgs {
    std::string scenario;
    std::optional<int> replicates;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::string out;
};

struct CheckArgs {
    std::string data;
    std::string strata;
    double tolerance = 0.0;
};

pereml::io::Dataset load(const std::string& data, const std::string& strata, double tolerance) {
    pereml::io::DatasetConfig cfg;
    cfg.strata = split_names(strata);
    cfg.treatment_tolerance = tolerance;
    if (cfg.strata.empty()) {
        throw pereml::SchemaError("--strata needs at least one column name");
    }
    return pereml::io::parse_dataset(data, cfg);
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream f(path);
    if (!f) {
        throw pereml::SchemaError("cannot write '" + path + "'");
    }
    f << text;
}

int run_fit(const FitArgs& a) {
    const auto ds = load(a.data, a.strata, a.tolerance);
    const auto set = a.method == "pe-reml"   ? pereml::MethodSet::PeReml
                     : a.method == "rs-reml" ? pereml::MethodSet::RsReml
                                             : pereml::MethodSet::Both;
    const auto rep = pereml::analyze(ds.design, ds.y, set, a.kr, {}, a.tolerance);
    std::ostringstream s;
    if (a.format == "json") {
        s << std::setprecision(17) << pereml::io::fit_report_json(rep).dump(2) << '\n';
    } else if (a.format == "csv") {
        pereml::io::write_fit_csv(s, rep);
    } else {
        pereml::io::write_fit_text(s, rep);
    }
    emit(a.out, s.str());
    return kOk;
}

int run_simulate(const SimulateArgs& a) {
    auto sc = pereml::io::load_scenario(a.scenario);
    if (a.replicates) {
        sc.spec.n_replicates = *a.replicates;
    }
    if (a.seed) {
        sc.spec.seed = *a.seed;
    }
    pereml::StudyOptions opt;
    opt.threads = a.threads;
    const auto rep = pereml::run_bias_study(sc.spec, sc.methods, sc.kr, opt);
    pereml::io::write_simulation_text(std::cout, rep);
    if (!a.out.empty()) {
        const std::filesystem::path dir(a.out);
        std::filesystem::create_directories(dir);
        std::ofstream csv(dir / (rep.name + ".csv"));
        std::ofstream js(dir / (rep.name + ".json"));
        if (!csv || !js) {
            throw pereml::SchemaError("cannot write reports into '" + a.out + "'");
        }
        pereml::io::write_simulation_csv(csv, rep);
        js << pereml::io::simulation_json(rep).dump(2) << '\n';
        std::cout << "\nReports written to " << (dir / (rep.name + ".csv")).string() << " and "
                  << (dir / (rep.name + ".json")).string() << '\n';
    }
    return kOk;
}

int run_check(const CheckArgs& a) {
    const auto ds = load(a.data, a.strata, a.tolerance);
    const auto mm = pereml::build_model_matrices(ds.design, a.tolerance);
    const auto f = pereml::pure_error_feasibility(mm.x_t, mm.z);
    std::vector<std::pair<std::string, std::string>> rows{{"runs", std::to_string(f.n)},
                                                          {"distinct treatments", std::to_string(f.t)},
                                                          {"second-order terms", std::to_string(mm.p)}};
    for (std::size_t j = 0; j < f.stratum_df.size(); ++j) {
        const std::string name =
            j < ds.design.stratum_names().size() ? ds.design.stratum_names()[j] : std::string("residual");
        rows.emplace_back("pure error df (" + name + ")", std::to_string(f.stratum_df[j]));
    }
    rows.emplace_back("residual pure error df", std::to_string(f.residual_df));
    rows.emplace_back("information matrix", f.information_nonsingular ? "nonsingular" : "singular");
    rows.emplace_back("PE-REML feasible", f.feasible ? "yes" : "no");
    std::size_t width = 0;
    for (const auto& [label, value] : rows) {
        width = std::max(width, label.size());
    }
    for (const auto& [label, value] : rows) {
        std::cout << label << std::string(width + 2 - label.size(), ' ') << value << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pure-error REML for split-plot response surface designs"};
    app.require_subcommand(1);

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit", "Estimate variance components and fixed effects");
    fit_cmd->add_option("--data", fit.data, "CSV dataset")->required()->check(CLI::ExistingFile);
    fit_cmd->add_option("--strata", fit.strata, "Stratum columns, outermost first, comma separated")->required();
    fit_cmd->add_option("--method", fit.method, "Variance component method")
        ->check(CLI::IsMember({"pe-reml", "rs-reml", "both"}));
    fit_cmd->add_flag("--kr", fit.kr, "Apply the Kenward-Roger correction");
    fit_cmd->add_option("--out", fit.out, "Output file (default stdout)");
    fit_cmd->add_option("--format", fit.format, "Output format")->check(CLI::IsMember({"text", "csv", "json"}));
    fit_cmd->add_option("--tolerance", fit.tolerance, "Relative tolerance for matching treatment levels");

    SimulateArgs sim;
    auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo comparison of PE-REML and RS-REML");
    sim_cmd->add_option("--scenario", sim.scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
    sim_cmd->add_option("--replicates", sim.replicates, "Override the replicate count")
        ->check(CLI::PositiveNumber);
    sim_cmd->add_option("--seed", sim.seed, "Override the scenario seed");
    sim_cmd->add_option("--threads", sim.threads, "Worker threads")->check(CLI::PositiveNumber);
    sim_cmd->add_option("--out", sim.out, "Directory for CSV and JSON reports");

    CheckArgs chk;
    auto* chk_cmd = app.add_subcommand("check", "Report pure-error degrees of freedom and PE-REML feasibility");
    chk_cmd->add_option("--data", chk.data, "CSV dataset")->required()->check(CLI::ExistingFile);
    chk_cmd->add_option("--strata", chk.strata, "Stratum columns, outermost first")->required();
    chk_cmd->add_option("--tolerance", chk.tolerance, "Relative tolerance for matching treatment levels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*fit_cmd) {
            return run_fit(fit);
        }
        if (*sim_cmd) {
            return run_simulate(sim);
        }
        return run_check(chk);
    } catch (const pereml::SchemaError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const pereml::NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumerical;
    }
}
