#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "slq/problems.hpp"
#include "slq/verify.hpp"

using namespace slq;

namespace {

struct Example37Tree {
    explicit Example37Tree(int depth)
        : model(build_tree(depth, 1.0), problems::example_3_7()), ctx(model),
          cg(solve_open_loop_cg(ctx, Vector::Ones(1), 1e-12)), dp(dp_solve(model)) {}

    TreeModel model;
    OperatorContext ctx;
    CgResult cg;
    DpSolution dp;
};

FeedbackPolicy example_3_7_feedback() {
    FeedbackPolicy f;
    f.gain_depends_on_w = false;
    f.gain = [](int, double t, double) {
        return (Matrix(2, 1) << -problems::example_3_7_riccati(t) / 5.0, 0.0).finished();
    };
    return f;
}

}  // namespace

TEST(CheckReportLogic, PassAndExpectedFailure) {
    CheckReport r{"x", {}, {}, "c"};
    r.add("a", 0.5, 1.0);
    EXPECT_TRUE(r.passed());
    EXPECT_TRUE(r.ok());
    r.add("b", 2.0, 1.0);
    EXPECT_FALSE(r.passed());
    EXPECT_FALSE(r.ok());
    r.expected_failure = true;
    EXPECT_TRUE(r.ok());
}

TEST(Stationarity, CgOptimumAndOffset) {
    const Example37Tree e(10);
    EXPECT_TRUE(check_stationarity(e.ctx, Vector::Ones(1), e.cg.u).passed());
    auto shifted = e.cg.u;
    for (int k = 0; k < 10; ++k)
        for (auto& v : shifted.level(k)) v(0) += 0.1;
    const auto bad = check_stationarity(e.ctx, Vector::Ones(1), shifted);
    EXPECT_FALSE(bad.passed());
    EXPECT_GE(bad.residuals.front().value, 0.4);
}

TEST(Stationarity, ZeroProblem) {
    const TreeModel model(build_tree(5, 1.0), problems::zero(1, 1));
    const OperatorContext ctx(model);
    const ControlVector u(0, 4, Vector::Ones(1));
    EXPECT_EQ(check_stationarity(ctx, Vector::Ones(1), u).residuals.front().value, 0.0);
}

TEST(Stationarity, EnsembleModeAlongFeedback) {
    const auto p = problems::example_3_7();
    const auto ens = generate_ensemble(50, 20000, 1.0, 1);
    const RegressionEngine engine(ens, RegressionBasis{});
    const auto se = simulate(p, example_3_7_feedback(), Vector::Ones(1), ens);
    const auto r = check_stationarity(p, engine, Vector::Ones(1), se.u, 0.25);
    EXPECT_TRUE(r.passed()) << r.residuals.front().value;
}

TEST(ValueRepresentation, Example37AndHomogeneity) {
    const Example37Tree e(12);
    const auto P = riccati_reference(e.model);
    const auto r = check_value_representation(e.ctx, Vector::Ones(1), e.cg.u, P);
    EXPECT_TRUE(r.passed());
    EXPECT_NEAR(r.metrics[0].second, 20.0 / 9.0, 1e-9);

    // the explicit tree SRE carries its own first-order error
    const auto sre = solve_sre_tree(e.model);
    const auto rs = check_value_representation(e.ctx, Vector::Ones(1), e.cg.u, sre.P, 0.61 * e.model.tree().dt());
    EXPECT_TRUE(rs.passed());

    const auto z = check_value_representation(e.ctx, Vector::Zero(1), e.ctx.zero_control(), P);
    for (const auto& m : z.metrics) EXPECT_EQ(m.second, 0.0);

    auto u2 = e.cg.u;
    for (int k = 0; k < 12; ++k)
        for (auto& v : u2.level(k)) v *= 2.0;
    const auto r2 = check_value_representation(e.ctx, Vector::Constant(1, 2.0), u2, sre.P);
    const auto r1 = check_value_representation(e.ctx, Vector::Ones(1), e.cg.u, sre.P);
    for (std::size_t i = 0; i < r1.residuals.size(); ++i)
        EXPECT_NEAR(r2.residuals[i].value, 4.0 * r1.residuals[i].value, 1e-10);
}

TEST(ClosedLoop, DpAndSreGains) {
    const Example37Tree e(12);
    const auto dp_check = check_closed_loop_agreement(e.ctx, Vector::Ones(1), e.cg.u, e.dp.theta, 1e-6, 1e-8);
    EXPECT_TRUE(dp_check.passed()) << dp_check.residuals[1].value;
    const auto sre = solve_sre_tree(e.model);
    const auto sre_check = check_closed_loop_agreement(e.ctx, Vector::Ones(1), e.cg.u, sre.theta, 0.05, 1.0);
    EXPECT_TRUE(sre_check.passed());
}

TEST(ClosedLoop, UncontrolledProblem) {
    auto p = problems::zero(1, 1);
    p.weights.R = MatrixField::constant(Matrix::Ones(1, 1));
    p.weights.Q = MatrixField::constant(Matrix::Ones(1, 1));
    const TreeModel model(build_tree(6, 1.0), p);
    const OperatorContext ctx(model);
    const auto cg = solve_open_loop_cg(ctx, Vector::Ones(1));
    const auto r = check_closed_loop_agreement(ctx, Vector::Ones(1), cg.u, dp_solve(model).theta, 0.0, 0.0);
    EXPECT_TRUE(r.passed());
}

TEST(YXIdentity, Example37) {
    const Example37Tree e(10);
    const auto P = riccati_reference(e.model);
    const auto r = check_yx_identity(e.ctx, P, 0.05, 1e-12, &e.dp.P);
    EXPECT_TRUE(r.passed()) << r.residuals[0].value;
    EXPECT_LE(r.residuals[0].value, 1e-6);
    EXPECT_GT(r.metrics[0].second, 0.0);
    EXPECT_LE(r.metrics[2].second, 1e-8);
}

TEST(YXIdentity, UncontrolledConditionalTerminal) {
    auto p = problems::tanh_terminal();
    const TreeModel model(build_tree(8, 1.0), p);
    const OperatorContext ctx(model);
    const auto dp = dp_solve(model);
    const auto r = check_yx_identity(ctx, dp.P, 1e-12);
    EXPECT_TRUE(r.passed());
    EXPECT_EQ(r.metrics[0].second, 1.0);
}

TEST(OptimalityPrinciple, Example37AndZeroProblem) {
    const Example37Tree e(10);
    EXPECT_TRUE(check_optimality_principle(e.ctx, Vector::Ones(1), e.cg.u, 5).passed());
    const auto bad = check_optimality_principle(e.ctx, Vector::Ones(1), e.ctx.zero_control(), 5);
    EXPECT_FALSE(bad.passed());
    // zero control from level 5 on: gap = x'(M - P)x with the uncontrolled kernel M = G
    const auto M = uncontrolled_cost_kernel(e.model);
    EXPECT_NEAR(bad.metrics[0].second, M(5, 0)(0, 0) - e.dp.P(5, 0)(0, 0), 1e-12);

    const TreeModel zm(build_tree(6, 1.0), problems::zero(1, 1));
    const OperatorContext zc(zm);
    EXPECT_EQ(check_optimality_principle(zc, Vector::Ones(1), zc.zero_control(), 3).residuals[0].value, 0.0);
}

TEST(CostPerturbation, TreeOptimum) {
    const Example37Tree e(10);
    const auto r = check_cost_perturbation(e.ctx, Vector::Ones(1), e.cg.u, 30, 5);
    EXPECT_TRUE(r.passed());
    EXPECT_GE(r.metrics[1].second, -1e-10);
}

TEST(CostPerturbation, MonteCarloFeedback) {
    const auto p = problems::example_3_7();
    const auto ens = generate_ensemble(50, 100000, 1.0, 6);
    const auto r = check_cost_perturbation(p, ens, example_3_7_feedback(), Vector::Ones(1), 9, 7);
    EXPECT_TRUE(r.passed()) << r.residuals[0].value;
}

TEST(Convexity, PositiveAndNegative) {
    const Example37Tree e(8);
    EXPECT_TRUE(check_convexity(e.ctx, 50, 1).passed());
    const TreeModel neg(build_tree(8, 1.0), problems::negated(problems::example_3_7()));
    auto r = check_convexity(OperatorContext(neg), 50, 1);
    r.expected_failure = true;
    EXPECT_FALSE(r.passed());
    EXPECT_TRUE(r.ok());
    EXPECT_FALSE(check_cg_solvable(OperatorContext(neg), Vector::Ones(1)).passed());
    EXPECT_TRUE(check_cg_solvable(e.ctx, Vector::Ones(1)).passed());
}

TEST(Reports, CsvAndSummary) {
    CheckReport r{"demo", {}, {}, "tree depth 3"};
    r.add("res", 0.25, 1.0);
    r.metric("m", 2.0);
    std::ostringstream csv, text;
    write_reports_csv(csv, {r});
    EXPECT_EQ(csv.str(),
              "check,label,value,tolerance,pass,expected_failure,carrier\n"
              "demo,\"res\",0.25,1,1,0,\"tree depth 3\"\n"
              "demo,\"m\",2,,,0,\"tree depth 3\"\n");
    write_summary(text, {r});
    EXPECT_EQ(text.str().rfind("[ ok ] demo", 0), 0u);
}
