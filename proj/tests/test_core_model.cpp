#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "slq/core_model.hpp"
#include "slq/problems.hpp"

using namespace slq;

TEST(ValidateProblem, ZeroProblemAccepted) {
    const auto report = validate_problem(problems::zero(1, 1));
    EXPECT_TRUE(report.accepted());
}

TEST(ValidateProblem, Example37AcceptedDespiteIndefiniteR) {
    const auto report = validate_problem(problems::example_3_7());
    EXPECT_TRUE(report.accepted()) << (report.violations.empty() ? "" : report.violations.front());
}

TEST(ValidateProblem, FlagsAsymmetricR) {
    auto p = problems::zero(1, 2);
    p.weights.R = MatrixField::constant((Matrix(2, 2) << 0.0, 1.0, 0.0, 0.0).finished());
    const auto report = validate_problem(p);
    ASSERT_FALSE(report.accepted());
    bool found = false;
    for (const auto& v : report.violations) found = found || (v.rfind("R:", 0) == 0 && v.find("asymmetric") != std::string::npos);
    EXPECT_TRUE(found);
}

TEST(ValidateProblem, FlagsBoundShapeAndEvaluatorFailure) {
    auto p = problems::zero(2, 1);
    p.coeffs.A = MatrixField::markov([](double, double w) { return Matrix::Constant(2, 2, w); });
    p.coeffs.B = MatrixField::constant(Matrix::Zero(1, 1));
    p.weights.Q = MatrixField::time_varying([](double t) -> Matrix {
        if (t > 0.5) throw std::runtime_error("boom");
        return Matrix::Zero(2, 2);
    });
    const auto report = validate_problem(p);
    ASSERT_EQ(report.violations.size(), 3u);
    EXPECT_NE(report.violations[0].find("exceeds declared bound"), std::string::npos);
    EXPECT_NE(report.violations[1].find("shape"), std::string::npos);
    EXPECT_NE(report.violations[2].find("evaluator failed"), std::string::npos);
}

TEST(EvalAll, Example37AtInteriorPoint) {
    const auto p = problems::example_3_7();
    const auto c = p.eval_all(0.5, 0.2);
    EXPECT_EQ(c.R, (Matrix(2, 2) << 5.0, 0.0, 0.0, -1.0).finished());
    EXPECT_EQ(c.D, (Matrix(1, 2) << 0.0, 1.0).finished());
    EXPECT_EQ(p.terminal(1.7)(0, 0), 4.0);
}

TEST(EvalAll, MarkovFieldAtZeroBrownianValue) {
    auto p = problems::zero(2, 1);
    p.coeffs.A = MatrixField::markov(
        [](double, double w) { return Matrix(std::sin(w) * Matrix::Identity(2, 2)); });
    EXPECT_EQ(p.eval_all(0.3, 0.0).A, Matrix::Zero(2, 2));
    EXPECT_EQ(p.kind(), FieldKind::markov);
    EXPECT_FALSE(p.is_deterministic());
}

TEST(EvalAll, OutsideHorizonIsDomainError) {
    const auto p = problems::example_3_7();
    EXPECT_THROW(p.eval_all(-0.1, 0.0), DomainError);
    EXPECT_THROW(p.eval_all(1.1, 0.0), DomainError);
    EXPECT_NO_THROW(p.eval_all(1.0, 0.0));
}

TEST(EvalAll, PureAndSymmetrizationIdempotent) {
    auto p = problems::zero(2, 2);
    p.weights.Q = MatrixField::markov(
        [](double t, double w) { return (Matrix(2, 2) << 1.0, t, w, 2.0).finished(); });
    const auto a = p.eval_all(0.25, 0.7);
    const auto b = p.eval_all(0.25, 0.7);
    EXPECT_EQ(a.Q, b.Q);
    EXPECT_EQ(a.Q, a.Q.transpose());
    EXPECT_EQ(symmetrized(a.Q), a.Q);
    EXPECT_DOUBLE_EQ(a.Q(0, 1), 0.5 * (0.25 + 0.7));
}

TEST(Problems, NegatedAndShiftedWeights) {
    const auto p = problems::example_3_7();
    const auto neg = problems::negated(p);
    EXPECT_EQ(neg.eval_all(0.0, 0.0).R, -p.eval_all(0.0, 0.0).R);
    EXPECT_EQ(neg.terminal(0.0)(0, 0), -4.0);
    const auto shifted = problems::shifted_control_weight(p, 0.1);
    EXPECT_NEAR(shifted.eval_all(0.0, 0.0).R(1, 1), -1.1, 1e-15);
    EXPECT_TRUE(validate_problem(shifted).accepted());
}
