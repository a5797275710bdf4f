#include <algorithm>
#include <numeric>
#include <random>

#include "test_support.hpp"

namespace pereml::test {
namespace {

TEST(Design, SplitPlotTreatments) {
    const auto ds = load_table2();
    const auto tc = identify_treatments(ds.design);
    EXPECT_EQ(tc.t, 49);
    const auto printed = read_int_column(data_path("table2.csv"), "treatment");
    ASSERT_EQ(printed.size(), tc.labels.size());
    for (std::size_t i = 0; i < printed.size(); ++i) {
        EXPECT_EQ(tc.labels[i] + 1, printed[i]) << "run " << i;
    }
    const MatrixXd xt = build_full_treatment_matrix(tc.labels, tc.t);
    const VectorXd counts = xt.colwise().sum().transpose();
    for (int r = 0; r < 49; ++r) {
        const int treatment = r + 1;
        const double expected = treatment == 45 ? 4.0 : treatment >= 41 ? 2.0 : 1.0;
        EXPECT_EQ(counts(r), expected) << "treatment " << treatment;
    }
    EXPECT_EQ(counts.sum(), 60.0);
    EXPECT_EQ(linalg::rank(xt), 49);
}

TEST(Design, SplitSplitPlotTreatments) {
    const auto ds = load_table4();
    const auto tc = identify_treatments(ds.design);
    EXPECT_EQ(tc.t, 30);
    const auto printed = read_int_column(data_path("table4.csv"), "treatment");
    for (std::size_t i = 0; i < printed.size(); ++i) {
        EXPECT_EQ(tc.labels[i] + 1, printed[i]);
    }
}

TEST(Design, IdenticalRowsGiveOneTreatment) {
    const MultiStratumDesign d(MatrixXd::Constant(5, 2, 0.5), {{0, 0, 1, 1, 2}});
    EXPECT_EQ(identify_treatments(d).t, 1);
}

TEST(Design, ToleranceMatching) {
    MatrixXd f(3, 1);
    f << 1.0, 1.0 + 1e-9, -1.0;
    const MultiStratumDesign d(f, {{0, 0, 1}});
    EXPECT_EQ(identify_treatments(d).t, 3);
    EXPECT_EQ(identify_treatments(d, 1e-6).t, 2);
}

TEST(Design, NonTransitiveToleranceIsAmbiguous) {
    MatrixXd f(3, 1);
    f << 1.0, 1.06, 1.12;
    const MultiStratumDesign d(f, {{0, 0, 1}});
    EXPECT_THROW(identify_treatments(d, 0.07), AmbiguousTreatmentError);
}

TEST(Design, FullTreatmentMatrixDefinition) {
    const MatrixXd xt = build_full_treatment_matrix({0, 1, 0}, 2);
    MatrixXd expected(3, 2);
    expected << 1, 0, 0, 1, 1, 0;
    EXPECT_EQ(xt, expected);
}

TEST(Design, UnreplicatedTreatmentMatrixIsPermutation) {
    const MatrixXd xt = build_full_treatment_matrix({2, 0, 3, 1}, 4);
    EXPECT_TRUE((xt.transpose() * xt).isIdentity());
    EXPECT_TRUE((xt.rowwise().sum().array() == 1.0).all());
}

TEST(Design, SecondOrderMatrix) {
    EXPECT_EQ(second_order_parameter_count(4), 15);
    EXPECT_EQ(second_order_parameter_count(1), 3);
    MatrixXd one(1, 1);
    one << 2.0;
    EXPECT_EQ(build_second_order_matrix(one), (MatrixXd(1, 3) << 1, 2, 4).finished());

    MatrixXd row(1, 4);
    row << -1, -1, 1, -1;
    MatrixXd expected(1, 15);
    expected << 1, -1, -1, 1, -1, 1, 1, 1, 1, 1, -1, 1, -1, 1, -1;
    EXPECT_EQ(build_second_order_matrix(row), expected);

    const auto names = second_order_names(4);
    const std::vector<std::string> want{"beta0",  "beta1",  "beta2",  "beta3",  "beta4",
                                        "beta11", "beta22", "beta33", "beta44", "beta12",
                                        "beta13", "beta14", "beta23", "beta24", "beta34"};
    EXPECT_EQ(names, want);
}

TEST(Design, StratumMatrices) {
    const auto t2 = build_stratum_matrices(load_table2().design);
    ASSERT_EQ(t2.size(), 1u);
    EXPECT_EQ(t2[0].rows(), 60);
    EXPECT_EQ(t2[0].cols(), 12);
    EXPECT_TRUE((t2[0].colwise().sum().array() == 5.0).all());
    EXPECT_TRUE((t2[0].rowwise().sum().array() == 1.0).all());

    const auto t4 = build_stratum_matrices(load_table4().design);
    ASSERT_EQ(t4.size(), 2u);
    EXPECT_EQ(t4[0].cols(), 6);
    EXPECT_EQ(t4[1].cols(), 12);
    EXPECT_TRUE((t4[0].colwise().sum().array() == 6.0).all());
    EXPECT_TRUE((t4[1].colwise().sum().array() == 3.0).all());
    EXPECT_TRUE((t4[1].transpose() * t4[1]).isApprox(3.0 * MatrixXd::Identity(12, 12)));

    const MultiStratumDesign single(MatrixXd::Zero(4, 1), {{7, 7, 7, 7}});
    EXPECT_EQ(build_stratum_matrices(single)[0], MatrixXd::Ones(4, 1));
}

TEST(Design, NestingViolationReportsRunAndStratum) {
    // Run 3 sits in whole plot 1 but shares subplot 1 with runs in whole plot 0.
    try {
        MultiStratumDesign d(MatrixXd::Zero(4, 1), {{0, 0, 1, 1}, {0, 0, 1, 0}});
        FAIL() << "nesting violation accepted";
    } catch (const NestingError& e) {
        EXPECT_EQ(e.run(), 3);
        EXPECT_EQ(e.stratum(), 1);
    }
    EXPECT_NO_THROW(MultiStratumDesign(MatrixXd::Zero(4, 1), {{0, 0, 1, 1}, {0, 0, 1, 0}}, {}, true));
}

TEST(Design, RejectsEmptyAndDegenerateStrata) {
    EXPECT_THROW(MultiStratumDesign(MatrixXd::Zero(0, 1), {{}}), SchemaError);
    // Every run its own unit: the stratum is confounded with the residual.
    EXPECT_THROW(MultiStratumDesign(MatrixXd::Zero(3, 1), {{0, 1, 2}}), SchemaError);
}

TEST(Feasibility, SplitPlot) {
    const auto mm = build_model_matrices(load_table2().design);
    const auto f = pure_error_feasibility(mm.x_t, mm.z);
    EXPECT_TRUE(f.feasible);
    EXPECT_EQ(f.t, 49);
    EXPECT_EQ(f.residual_df, 11);
    // Replicated treatments occur only in different whole plots, so pure
    // error carries both whole-plot and residual information.
    ASSERT_EQ(f.stratum_df.size(), 2u);
    EXPECT_GT(f.stratum_df[0], 0);
    EXPECT_GT(f.stratum_df[1], 0);
    EXPECT_EQ(f.stratum_df[0] + f.stratum_df[1], 11);
}

TEST(Feasibility, SplitSplitPlot) {
    const auto ds = load_table4();
    const auto mm = build_model_matrices(ds.design);
    const auto f = pure_error_feasibility(mm.x_t, mm.z);
    EXPECT_TRUE(f.feasible);
    EXPECT_EQ(f.residual_df, 6);
    const auto counts = mm.treatments.counts();
    std::vector<int> replicated;
    for (std::size_t r = 0; r < counts.size(); ++r) {
        if (counts[r] > 1) {
            replicated.push_back(static_cast<int>(r) + 1);
        }
    }
    EXPECT_EQ(replicated, (std::vector<int>{2, 13, 14, 15}));
}

TEST(Feasibility, SaturatedDesignIsInfeasible) {
    MatrixXd f(6, 2);
    f << 0, 0, 1, 0, 0, 1, 1, 1, -1, 0, 0, -1;
    const MultiStratumDesign d(f, {{0, 0, 1, 1, 2, 2}});
    const auto mm = build_model_matrices(d);
    const auto rep = pure_error_feasibility(mm.x_t, mm.z);
    EXPECT_FALSE(rep.feasible);
    EXPECT_EQ(rep.residual_df, 0);
}

TEST(DesignProperties, RelabelingLeavesTreatmentProjectionUnchanged) {
    const auto tc = identify_treatments(load_table2().design);
    std::vector<int> perm(static_cast<std::size_t>(tc.t));
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937 gen(11);
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<int> relabeled;
    for (int l : tc.labels) {
        relabeled.push_back(perm[static_cast<std::size_t>(l)]);
    }
    const MatrixXd a = build_full_treatment_matrix(tc.labels, tc.t);
    const MatrixXd b = build_full_treatment_matrix(relabeled, tc.t);
    EXPECT_EQ(a * a.transpose(), b * b.transpose());
}

TEST(DesignProperties, PolynomialSpaceNestedInTreatmentSpace) {
    for (unsigned seed = 1; seed <= 5; ++seed) {
        const auto d = balanced_design({4}, 6, 3, seed);
        const auto mm = build_model_matrices(d);
        const MatrixXd m_t = linalg::residual_maker(mm.x_t);
        EXPECT_LT((m_t * mm.x).norm(), 1e-10 * mm.x.norm()) << "seed " << seed;
    }
}

TEST(DesignProperties, BalancedStrataGram) {
    const auto d = balanced_design({3, 4}, 2, 2, 3);
    const auto z = build_stratum_matrices(d);
    EXPECT_TRUE((z[0].transpose() * z[0]).isApprox(8.0 * MatrixXd::Identity(3, 3)));
    EXPECT_TRUE((z[1].transpose() * z[1]).isApprox(2.0 * MatrixXd::Identity(12, 12)));
}

}  // namespace
}  // namespace pereml::test
