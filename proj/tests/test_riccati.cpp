#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "slq/problems.hpp"
#include "slq/riccati.hpp"

using namespace slq;

namespace {

double example_3_7_lambda(double t) { return std::min(5.0, (11.0 + 4.0 * t) / (9.0 - 4.0 * t)); }

}  // namespace

TEST(FeedbackGain, Example37AtTimeZero) {
    const auto p = problems::example_3_7();
    const auto g = feedback_gain(Matrix::Constant(1, 1, 20.0 / 9.0), Matrix::Zero(1, 1), p.eval_all(0.0, 0.0));
    EXPECT_NEAR(g.theta(0, 0), -4.0 / 9.0, 1e-15);
    EXPECT_EQ(g.theta(1, 0), 0.0);
    EXPECT_NEAR(g.lambda_min, 11.0 / 9.0, 1e-15);
}

TEST(FeedbackGain, VanishingCouplingGivesZeroGain) {
    auto c = problems::example_3_7().eval_all(0.0, 0.0);
    EXPECT_TRUE(feedback_gain(Matrix::Zero(1, 1), Matrix::Zero(1, 1), c).theta.isZero(0.0));
    c.B.setZero();
    EXPECT_TRUE(feedback_gain(Matrix::Constant(1, 1, 3.0), Matrix::Zero(1, 1), c).theta.isZero(0.0));
}

TEST(FeedbackGain, SingularIsGainError) {
    const auto c = problems::example_3_7().eval_all(0.0, 0.0);
    EXPECT_THROW(feedback_gain(Matrix::Constant(1, 1, 1.0), Matrix::Zero(1, 1), c), GainError);
}

TEST(RiccatiOde, Example37Analytic) {
    const auto sol = solve_riccati_ode(problems::example_3_7(), 10000);
    double err = 0.0, lerr = 0.0;
    for (std::size_t k = 0; k < sol.times.size(); ++k) {
        err = std::max(err, std::abs(sol.P[k](0, 0) - problems::example_3_7_riccati(sol.times[k])));
        lerr = std::max(lerr, std::abs(sol.lambda_min[k] - example_3_7_lambda(sol.times[k])));
    }
    EXPECT_LE(err, 1e-8);
    EXPECT_LE(lerr, 1e-8);
    EXPECT_TRUE(sol.certified());
    EXPECT_EQ(sol.P.back()(0, 0), 4.0);
    EXPECT_NEAR(sol.theta.front()(0, 0), -4.0 / 9.0, 1e-8);
}

TEST(RiccatiOde, LinearLyapunovCase) {
    auto p = problems::zero(2, 1);
    const Matrix Q = (Matrix(2, 2) << 2.0, 0.5, 0.5, 1.0).finished();
    const Matrix G = (Matrix(2, 2) << 1.0, 0.0, 0.0, 3.0).finished();
    p.weights.Q = MatrixField::constant(Q);
    p.weights.G = [G](double) { return G; };
    const auto sol = solve_riccati_ode(p, 50);
    for (std::size_t k = 0; k < sol.times.size(); ++k)
        EXPECT_LE((sol.P[k] - (G + Q * (1.0 - sol.times[k]))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RiccatiOde, StandardConditionCertificate) {
    const auto sol = solve_riccati_ode(problems::standard_condition(), 1000);
    EXPECT_GT(sol.lambda_min_overall, 1.0);
    for (const auto& P : sol.P) EXPECT_GE(P(0, 0), 0.0);
}

TEST(RiccatiOde, Errors) {
    EXPECT_THROW(solve_riccati_ode(problems::tanh_terminal(), 10), DomainError);
    try {
        solve_riccati_ode(problems::shifted_control_weight(problems::example_3_7(), 3.0), 100);
        FAIL() << "expected RiccatiBlowup";
    } catch (const RiccatiBlowup& e) {
        EXPECT_EQ(e.time(), 1.0);
    }
}

TEST(RiccatiOde, MonotoneInControlWeight) {
    const auto base = solve_riccati_ode(problems::example_3_7(), 2000);
    const auto shifted = solve_riccati_ode(problems::shifted_control_weight(problems::example_3_7(), 0.1), 2000);
    EXPECT_LE(shifted.P.front()(0, 0), base.P.front()(0, 0) + 1e-9);
}

TEST(SreTree, DeterministicCoefficients) {
    const TreeModel model(build_tree(12, 1.0), problems::example_3_7());
    const auto sre = solve_sre_tree(model);
    for (int k = 0; k < 12; ++k)
        for (const auto& L : sre.Lambda.level(k)) EXPECT_LE(L.cwiseAbs().maxCoeff(), 1e-12);
    const double dt = model.tree().dt();
    const auto ode = solve_riccati_ode(problems::example_3_7(), 1200);
    EXPECT_LE(std::abs(sre.P(0, 0)(0, 0) - ode.P.front()(0, 0)), 0.61 * dt);
    const auto dp = dp_solve(model);
    EXPECT_NEAR(dp.value(Vector::Ones(1)), 20.0 / 9.0, 1e-12);
    EXPECT_LE(std::abs(sre.P(0, 0)(0, 0) - dp.value(Vector::Ones(1))), 0.61 * dt);
    // the gain at level k is built from E[P_{k+1}]
    for (int k = 0; k < 12; ++k)
        EXPECT_LE(std::abs(sre.lambda_min_by_level[static_cast<std::size_t>(k)] -
                           example_3_7_lambda(model.tree().time(k + 1))),
                  0.65 * dt);
    EXPECT_TRUE(sre.certified());
}

TEST(SreTree, FirstOrderConvergence) {
    for (int N : {12, 16, 20, 24}) {
        const TreeModel model(build_tree(N, 1.0), problems::example_3_7());
        const double gap = std::abs(solve_sre_tree(model).P(0, 0)(0, 0) - 20.0 / 9.0);
        EXPECT_NEAR(N * gap, 0.6, 0.02);
        if (N >= 16) {
            EXPECT_LE(gap, 0.05);
        }
    }
}

TEST(SreTree, SampledOdeOnTree) {
    const auto tree = build_tree(10, 1.0);
    const auto ode = solve_riccati_ode(problems::example_3_7(), 1000);
    const auto P = sample_on_tree(ode, tree);
    for (int k = 0; k <= 10; ++k)
        EXPECT_NEAR(P(k, 0)(0, 0), 20.0 / (9.0 - 4.0 * tree.time(k)), 1e-9);
    EXPECT_THROW(sample_on_tree(solve_riccati_ode(problems::example_3_7(), 15), tree), CarrierMismatch);
}

TEST(SreTree, ZeroProblem) {
    const TreeModel model(build_tree(5, 1.0), problems::zero(2, 2));
    const auto sre = solve_sre_tree(model);
    for (int k = 0; k <= 5; ++k)
        for (const auto& P : sre.P.level(k)) EXPECT_TRUE(P.isZero(0.0));
}

TEST(SreTree, TanhTerminalIsMartingale) {
    const int N = 10;
    const TreeModel model(build_tree(N, 1.0), problems::tanh_terminal());
    const auto sre = solve_sre_tree(model);
    TreeProcess<double> G(0, N);
    for (std::size_t j = 0; j < BernoulliTree::level_size(N); ++j) G(N, j) = 2.0 + std::tanh(model.tree().w(N, j));
    for (int k = N - 1; k >= 0; --k) {
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            G(k, j) = cond_expect(G, k, j);
            EXPECT_NEAR(sre.P(k, j)(0, 0), G(k, j), 1e-13);
            EXPECT_NEAR(sre.Lambda(k, j)(0, 0), cond_expect_increment(model.tree(), G, k, j) / model.tree().dt(), 1e-12);
        }
    }
    EXPECT_DOUBLE_EQ(sre.P(0, 0)(0, 0), 2.0);
}

TEST(SreTree, SymmetryAndTerminal) {
    const TreeModel model(build_tree(9, 1.0), problems::markov_benchmark());
    const auto sre = solve_sre_tree(model);
    for (int k = 0; k <= 9; ++k)
        for (const auto& P : sre.P.level(k)) EXPECT_LE((P - P.transpose()).cwiseAbs().maxCoeff(), 1e-10);
    for (std::size_t j = 0; j < BernoulliTree::level_size(9); ++j) EXPECT_EQ(sre.P(9, j), model.terminal(j));
    EXPECT_TRUE(sre.certified());
}

TEST(SreTree, MonotoneInControlWeight) {
    const TreeModel base(build_tree(10, 1.0), problems::example_3_7());
    const TreeModel shifted(build_tree(10, 1.0), problems::shifted_control_weight(problems::example_3_7(), 0.1));
    EXPECT_LE(solve_sre_tree(shifted).P(0, 0)(0, 0), solve_sre_tree(base).P(0, 0)(0, 0) + 1e-9);
}

TEST(SreLsmc, Example37) {
    const auto ens = generate_ensemble(100, 100000, 1.0, 12);
    const auto sol = solve_sre_lsmc(problems::example_3_7(), ens);
    EXPECT_NEAR(sol.P0(0, 0), 20.0 / 9.0, 0.02);
    EXPECT_TRUE(sol.certified());
    EXPECT_LE(sol.max_asymmetry, 1e-10);
}

TEST(SreLsmc, ZeroProblem) {
    const auto ens = generate_ensemble(10, 1000, 1.0, 13);
    const auto sol = solve_sre_lsmc(problems::zero(1, 1), ens);
    for (const auto& P : sol.P) EXPECT_TRUE(P.isZero(0.0));
}

TEST(SreLsmc, TanhTerminalAgainstTree) {
    const auto ens = generate_ensemble(20, 50000, 1.0, 14);
    const auto p = problems::tanh_terminal();
    const auto sol = solve_sre_lsmc(p, ens);
    const TreeModel model(build_tree(14, 1.0), p);
    const double tree = solve_sre_tree(model).P(0, 0)(0, 0);
    EXPECT_LE(std::abs(sol.P0(0, 0) - tree), 3.0 * sol.P0_std_error(0, 0));
    for (Eigen::Index i = 0; i < 100; ++i)
        EXPECT_EQ(sol.P.back()(i, 0), 2.0 + std::tanh(ens.W(i, 20)));
}

TEST(GainTable, RoundTripAndPolicy) {
    const auto p = problems::example_3_7();
    const auto ode = solve_riccati_ode(p, 200);
    std::stringstream ss;
    write_gain_table(ss, 1, 2, gain_rows(ode));
    const std::string header = ss.str().substr(0, ss.str().find('\n'));
    EXPECT_EQ(header, "t,w,P00,Theta00,Theta10,lambda_min");
    const auto rows = read_gain_table(ss, 1, 2);
    ASSERT_EQ(rows.size(), 201u);
    EXPECT_EQ(rows.front().P(0, 0), ode.P.front()(0, 0));

    const auto policy = gain_table_policy(rows);
    EXPECT_FALSE(policy.gain_depends_on_w);
    const auto ens = generate_ensemble(200, 10, 1.0, 15);
    const double J = evaluate_cost(p, ens, simulate(p, policy, Vector::Ones(1), ens)).mean;
    EXPECT_NEAR(J, 20.0 / 9.0, 0.02);
}

TEST(GainTable, LsmcRowsInterpolateInW) {
    const auto p = problems::markov_benchmark();
    const auto ens = generate_ensemble(20, 20000, 1.0, 16);
    const auto sol = solve_sre_lsmc(p, ens);
    const auto rows = gain_rows(p, sol, {-1.0, 0.0, 1.0});
    EXPECT_EQ(rows.size(), 1u + 19u * 3u);
    const auto policy = gain_table_policy(rows);
    EXPECT_TRUE(policy.gain_depends_on_w);
    const Matrix mid = policy.gain(5, 0.25, 0.5);
    const Matrix lo = sol.gain(p, 5, 0.0), hi = sol.gain(p, 5, 1.0);
    EXPECT_NEAR(mid(0, 0), 0.5 * (lo(0, 0) + hi(0, 0)), 1e-12);
}
