#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <sys/wait.h>

#include "test_support.hpp"

namespace pereml::test {
namespace {

io::Dataset parse_text(const std::string& text, std::vector<std::string> strata) {
    std::istringstream in(text);
    io::DatasetConfig cfg;
    cfg.strata = std::move(strata);
    return io::parse_dataset(in, cfg);
}

std::string error_of(const std::string& text, std::vector<std::string> strata) {
    try {
        parse_text(text, std::move(strata));
    } catch (const SchemaError& e) {
        return e.what();
    }
    return "";
}

TEST(Io, ParsesBundledTables) {
    const auto t2 = load_table2();
    EXPECT_EQ(t2.design.n_runs(), 60);
    EXPECT_EQ(t2.design.n_strata(), 1);
    EXPECT_EQ(t2.design.n_factors(), 4);
    EXPECT_DOUBLE_EQ(t2.y(0), 29.46);
    const auto t4 = load_table4();
    EXPECT_EQ(t4.design.n_runs(), 36);
    EXPECT_EQ(t4.design.n_strata(), 2);
    EXPECT_EQ(t4.design.stratum_names(), (std::vector<std::string>{"whole_plot", "subplot"}));
}

TEST(Io, Diagnostics) {
    EXPECT_EQ(error_of("wp,x1,y\n", {"wp"}), "no runs");
    EXPECT_NE(error_of("wp,x1\n1,2\n", {"wp"}).find("missing column 'y'"), std::string::npos);
    EXPECT_NE(error_of("wp,x1,y\n1,0,2\n1,abc,3\n", {"wp"}).find("line 3"), std::string::npos);
    EXPECT_NE(error_of("wp,x1,y\n1,0,2\n1,1\n", {"wp"}).find("line 3"), std::string::npos);
    EXPECT_NE(error_of("wp,x2,y\n1,0,2\n", {"wp"}).find("x1"), std::string::npos);
    EXPECT_NE(error_of("wp,x1,y\n1,,2\n", {"wp"}).find("line 2"), std::string::npos);
    const std::string nesting = error_of("wp,sp,x1,y\n1,a,0,1\n1,a,1,2\n2,b,0,3\n2,a,1,4\n1,c,0,5\n", {"wp", "sp"});
    EXPECT_NE(nesting.find("line 5"), std::string::npos) << nesting;
}

TEST(Io, StringLabelsAndExtraColumns) {
    const auto ds = parse_text("note,block,x1,x2,y\nfoo,A,0,1,2.5\nbar,A,1,1,3\nbaz,B,0,0,4\nqux,B,1,0,5\n", {"block"});
    EXPECT_EQ(ds.design.stratum_assignments()[0], (std::vector<int>{0, 0, 1, 1}));
    EXPECT_EQ(ds.design.n_factors(), 2);
}

TEST(Io, RoundTripIsExact) {
    const auto t4 = load_table4();
    VectorXd y = t4.y;
    y(0) = 1.0 / 3.0;
    y(1) = -2.718281828459045e-7;
    std::ostringstream out;
    io::write_dataset(out, t4.design, y);
    const auto back = parse_text(out.str(), {"whole_plot", "subplot"});
    EXPECT_EQ(back.y, y);
    EXPECT_EQ(back.design.factor_levels(), t4.design.factor_levels());
    EXPECT_EQ(back.design.stratum_assignments(), t4.design.stratum_assignments());
}

TEST(Io, JsonAndTextCarryTheSameNumbers) {
    const auto ds = load_table2();
    const auto rep = analyze(ds.design, ds.y, MethodSet::Both, true);
    const auto j = io::fit_report_json(rep);
    EXPECT_EQ(j["pe-reml"]["estimate"][5].get<double>(), rep.pe->fixed.beta_hat(5));
    EXPECT_EQ(j["rs-reml"]["se_kr"][7].get<double>(), rep.rs->fixed.se_kr(7));
    std::ostringstream text;
    io::write_fit_text(text, rep);
    EXPECT_NE(text.str().find("0.9578"), std::string::npos);
    EXPECT_NE(text.str().find("-6.1591"), std::string::npos);
    std::ostringstream csv;
    io::write_fit_csv(csv, rep);
    std::istringstream rows(csv.str());
    std::string header;
    std::getline(rows, header);
    EXPECT_EQ(header, "parameter,est_rs_reml,est_pe_reml,se_rs_reml,se_pe_reml,se_rs_reml_kr,se_pe_reml_kr");
}

TEST(Io, BundledScenariosLoad) {
    for (const char* name : {"sec5_correct", "sec5_beta112", "sec5_beta334", "sec5_many_small"}) {
        const auto sc = io::load_scenario(data_path(std::string("scenarios/") + name + ".json"));
        EXPECT_EQ(sc.spec.name, name);
        EXPECT_EQ(sc.spec.n_replicates, 10000);
        EXPECT_EQ(sc.spec.design.n_runs(), 60);
        EXPECT_TRUE(sc.kr);
        EXPECT_EQ(sc.methods.size(), 2u);
    }
    EXPECT_EQ(io::load_scenario(data_path("scenarios/sec5_many_small.json")).spec.extra_terms.size(), 16u);
    EXPECT_EQ(io::load_scenario(data_path("scenarios/sec5_beta112.json")).spec.extra_terms.at("112"), 5.0);
}

TEST(Io, ScenarioDiagnostics) {
    const auto dir = std::filesystem::temp_directory_path() / "pereml_io_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "bad.json";
    std::filesystem::copy_file(data_path("table2.csv"), dir / "t2.csv", std::filesystem::copy_options::overwrite_existing);
    auto write = [&](const std::string& body) {
        std::ofstream(path) << body;
    };
    write("{ not json");
    EXPECT_THROW(io::load_scenario(path), SchemaError);
    write(R"({"design": "t2.csv", "strata": ["whole_plot"], "beta_true": {}, "sigma_true": [1.0]})");
    EXPECT_THROW(io::load_scenario(path), SchemaError);
    write(R"({"design": "t2.csv", "strata": ["whole_plot"], "beta_true": {"beta7": 1}, "sigma_true": [1.0, 1.0]})");
    EXPECT_THROW(io::load_scenario(path), SchemaError);
    write(R"({"design": "t2.csv", "strata": ["whole_plot"], "beta_true": {}, "extra_terms": {"159": 1},
              "sigma_true": [1.0, 1.0]})");
    EXPECT_THROW(io::load_scenario(path), SchemaError);
    write(R"({"design": "t2.csv", "strata": ["whole_plot"], "beta_true": {}, "sigma_true": [1.0, 1.0],
              "methods": ["ml"]})");
    EXPECT_THROW(io::load_scenario(path), SchemaError);
    std::filesystem::remove_all(dir);
}

int run_cli(const std::string& args, std::string* out = nullptr) {
    const auto tmp = std::filesystem::temp_directory_path() / "pereml_cli_out.txt";
    const std::string cmd = std::string(PEREML_CLI) + " " + args + " > " + tmp.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (out) {
        std::ifstream in(tmp);
        *out = std::string(std::istreambuf_iterator<char>(in), {});
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, FitSplitPlot) {
    std::string out;
    ASSERT_EQ(run_cli("fit --data " + data_path("table2.csv") + " --strata whole_plot --method both --kr", &out), 0);
    EXPECT_NE(out.find("0.9578"), std::string::npos);
    EXPECT_NE(out.find("0.7245"), std::string::npos);
    EXPECT_NE(out.find("5.3738"), std::string::npos);
}

TEST(Cli, JsonOutput) {
    std::string out;
    ASSERT_EQ(run_cli("fit --data " + data_path("table4.csv") + " --strata whole_plot,subplot --format json", &out), 0);
    const auto j = nlohmann::json::parse(out);
    EXPECT_EQ(j["pe-reml"]["variance_components"].size(), 3u);
}

TEST(Cli, ExitCodes) {
    std::string out;
    EXPECT_EQ(run_cli("fit --strata whole_plot"), 2);
    EXPECT_EQ(run_cli("fit --data " + data_path("table2.csv") + " --strata whole_plot --method ml"), 2);
    EXPECT_EQ(run_cli("fit --data " + data_path("table2.csv") + " --strata missing_col", &out), 2);
    EXPECT_NE(out.find("missing column"), std::string::npos);
    EXPECT_EQ(run_cli("frobnicate"), 2);

    const auto sat = std::filesystem::temp_directory_path() / "pereml_saturated.csv";
    std::ofstream(sat) << "whole_plot,x1,x2,y\n1,0,0,1\n1,1,0,2\n2,0,1,3\n2,1,1,4\n3,-1,0,2\n3,0,-1,5\n";
    EXPECT_EQ(run_cli("fit --data " + sat.string() + " --strata whole_plot --method pe-reml", &out), 3);
    EXPECT_NE(out.find("PE-REML infeasible: no pure error degrees of freedom"), std::string::npos);
    EXPECT_EQ(run_cli("check --data " + sat.string() + " --strata whole_plot", &out), 0);
    EXPECT_TRUE(std::regex_search(out, std::regex("PE-REML feasible +no\\n")));
}

TEST(Cli, SimulateWritesReports) {
    const auto dir = std::filesystem::temp_directory_path() / "pereml_sim_out";
    std::filesystem::remove_all(dir);
    std::string out;
    ASSERT_EQ(run_cli("simulate --scenario " + data_path("scenarios/sec5_beta112.json") +
                          " --replicates 1 --out " + dir.string(),
                      &out),
              0);
    EXPECT_NE(out.find("undefined"), std::string::npos);
    EXPECT_TRUE(std::filesystem::exists(dir / "sec5_beta112.csv"));
    std::ifstream js(dir / "sec5_beta112.json");
    const auto j = nlohmann::json::parse(js);
    EXPECT_FALSE(j["methods"]["pe-reml"]["empirical_se_defined"].get<bool>());
    std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace pereml::test
