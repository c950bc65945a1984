#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "slq/operators.hpp"
#include "slq/problems.hpp"

using namespace slq;

namespace {

double max_diff(const ControlVector& a, const ControlVector& b) {
    double out = 0.0;
    for (int k = a.first_level(); k <= a.last_level(); ++k)
        for (std::size_t j = 0; j < a.level(k).size(); ++j)
            out = std::max(out, (a(k, j) - b(k, j)).cwiseAbs().maxCoeff());
    return out;
}

double max_abs(const ControlVector& a) {
    double out = 0.0;
    for (int k = a.first_level(); k <= a.last_level(); ++k)
        for (const auto& v : a.level(k)) out = std::max(out, v.cwiseAbs().maxCoeff());
    return out;
}

}  // namespace

TEST(InnerProduct, SimpleControls) {
    const TreeModel model(build_tree(4, 1.0), problems::example_3_7());
    const OperatorContext ctx(model);
    const auto zero = ctx.zero_control();
    EXPECT_EQ(inner_product(ctx, zero, zero), 0.0);
    const ControlVector e1(0, 3, Vector::Unit(2, 0));
    EXPECT_DOUBLE_EQ(inner_product(ctx, e1, e1), 1.0);

    auto p = problems::zero(1, 1, 2.0);
    const TreeModel m2(build_tree(2, 2.0), p);
    const OperatorContext c2(m2);
    ControlVector sign = c2.zero_control();
    sign(0, 0)(0) = 1.0;
    for (std::size_t j = 0; j < 2; ++j) sign(1, j)(0) = j == 0 ? 1.0 : -1.0;
    EXPECT_DOUBLE_EQ(inner_product(c2, sign, sign), 2.0);
}

TEST(InnerProduct, CarrierMismatch) {
    const TreeModel model(build_tree(4, 1.0), problems::example_3_7());
    const OperatorContext ctx(model), late(model, 2);
    EXPECT_THROW(inner_product(ctx, ctx.zero_control(), late.zero_control()), CarrierMismatch);
    EXPECT_THROW(OperatorContext(model, 4), DomainError);
}

TEST(ApplyN, ZeroAndDecoupledCases) {
    const TreeModel model(build_tree(6, 1.0), problems::markov_benchmark());
    const OperatorContext ctx(model);
    EXPECT_EQ(max_abs(apply_N(ctx, ctx.zero_control())), 0.0);

    auto p = problems::zero(2, 2);
    const Matrix R = (Matrix(2, 2) << 2.0, 0.5, 0.5, -1.0).finished();
    p.weights.R = MatrixField::constant(R);
    p.weights.Q = MatrixField::constant(Matrix::Identity(2, 2));
    p.coeffs.A = MatrixField::constant(Matrix::Identity(2, 2));
    const TreeModel m2(build_tree(5, 1.0), p);
    const OperatorContext c2(m2);
    std::mt19937_64 rng(1);
    const auto u = random_control(c2, rng, false);
    const auto Nu = apply_N(c2, u);
    ControlVector Ru = u;
    for (int k = 0; k < 5; ++k)
        for (auto& v : Ru.level(k)) v = R * v;
    EXPECT_LE(max_diff(Nu, Ru), 1e-14);
}

TEST(ApplyN, QuadraticFormIsZeroStateCost) {
    const TreeModel model(build_tree(8, 1.0), problems::example_3_7());
    const OperatorContext ctx(model);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 5; ++i) {
        const auto u = random_control(ctx, rng, i == 4);
        EXPECT_NEAR(inner_product(ctx, apply_N(ctx, u), u), ctx.cost(Vector::Zero(1), u), 1e-10);
    }
}

TEST(ApplyN, SelfAdjointAndLinear) {
    const TreeModel model(build_tree(10, 1.0), problems::markov_benchmark());
    const OperatorContext ctx(model);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto u = random_control(ctx, rng, i % 10 == 9);
        const auto v = random_control(ctx, rng, false);
        const double a = inner_product(ctx, apply_N(ctx, u), v);
        const double b = inner_product(ctx, u, apply_N(ctx, v));
        EXPECT_LE(std::abs(a - b), 1e-10 * control_norm(ctx, u) * control_norm(ctx, v));
        if (i < 5) {
            const auto lhs = apply_N(ctx, linear_combination(1.5, u, -0.7, v));
            const auto rhs = linear_combination(1.5, apply_N(ctx, u), -0.7, apply_N(ctx, v));
            EXPECT_LE(max_diff(lhs, rhs), 1e-10);
        }
    }
}

TEST(ApplyL, ZeroAndLinear) {
    const TreeModel model(build_tree(8, 1.0), problems::markov_benchmark());
    const OperatorContext ctx(model);
    EXPECT_EQ(max_abs(apply_L(ctx, Vector::Zero(1))), 0.0);
    const auto a = apply_L(ctx, Vector::Constant(1, 0.4));
    const auto b = apply_L(ctx, Vector::Constant(1, -1.3));
    const auto ab = apply_L(ctx, Vector::Constant(1, 0.4 - 1.3));
    EXPECT_LE(max_diff(ab, linear_combination(1.0, a, 1.0, b)), 1e-10);

    auto p = problems::zero(2, 1);
    p.coeffs.A = MatrixField::constant(Matrix::Identity(2, 2));
    p.weights.Q = MatrixField::constant(Matrix::Identity(2, 2));
    p.weights.R = MatrixField::constant(Matrix::Identity(1, 1));
    const TreeModel m2(build_tree(5, 1.0), p);
    EXPECT_EQ(max_abs(apply_L(OperatorContext(m2), Vector::Ones(2))), 0.0);
}

TEST(ApplyL, BoundedAcrossDepths) {
    const auto p = problems::markov_benchmark();
    double lo = 1e300, hi = 0.0;
    for (int N = 6; N <= 14; N += 2) {
        const TreeModel model(build_tree(N, 1.0), p);
        const OperatorContext ctx(model);
        const auto L = apply_L(ctx, Vector::Ones(1));
        const double ratio = inner_product(ctx, L, L);
        lo = std::min(lo, ratio);
        hi = std::max(hi, ratio);
    }
    EXPECT_LT(hi / lo, 1.5);
}

TEST(CostRepresentation, OperatorFormMatchesDirectCost) {
    for (const auto& p : {problems::example_3_7(), problems::markov_benchmark()}) {
        const TreeModel model(build_tree(10, 1.0), p);
        const OperatorContext ctx(model);
        const auto M = uncontrolled_cost_kernel(model);
        std::mt19937_64 rng(4);
        std::normal_distribution<double> normal;
        for (int i = 0; i < 20; ++i) {
            const Vector xi = Vector::Constant(1, normal(rng));
            const auto u = random_control(ctx, rng, i % 10 == 9);
            const double direct = ctx.cost(xi, u);
            const double form = inner_product(ctx, apply_N(ctx, u), u) +
                                2.0 * inner_product(ctx, apply_L(ctx, xi), u) + xi.dot(M(0, 0) * xi);
            EXPECT_NEAR(direct, form, 1e-9) << p.name;
        }
    }
}

TEST(CostRepresentation, LaterInitialLevel) {
    const TreeModel model(build_tree(8, 1.0), problems::markov_benchmark());
    const OperatorContext ctx(model, 3);
    const auto M = uncontrolled_cost_kernel(model);
    std::mt19937_64 rng(5);
    const auto u = random_control(ctx, rng, false);
    const Vector xi = Vector::Constant(1, 0.8);
    const double form = inner_product(ctx, apply_N(ctx, u), u) + 2.0 * inner_product(ctx, apply_L(ctx, xi), u) +
                        xi.dot(level_mean(M, 3) * xi);
    EXPECT_NEAR(ctx.cost(xi, u), form, 1e-10);
}

TEST(Cg, ZeroRightHandSide) {
    const TreeModel model(build_tree(6, 1.0), problems::example_3_7());
    const auto res = solve_open_loop_cg(OperatorContext(model), Vector::Zero(1));
    EXPECT_EQ(res.iterations, 0);
    EXPECT_EQ(max_abs(res.u), 0.0);
}

TEST(Cg, MatchesDynamicProgramming) {
    const TreeModel model(build_tree(10, 1.0), problems::example_3_7());
    const OperatorContext ctx(model);
    const auto res = solve_open_loop_cg(ctx, Vector::Ones(1), 1e-12);
    EXPECT_LE(res.residual, 1e-11 * res.rhs_norm);
    EXPECT_NEAR(ctx.cost(Vector::Ones(1), res.u), dp_solve(model).value(Vector::Ones(1)), 1e-9);
    for (std::size_t i = 1; i < res.trace.size(); ++i)
        EXPECT_LE(res.trace[i].objective, res.trace[i - 1].objective);
    std::ostringstream os;
    write_cg_trace_csv(os, res.trace);
    EXPECT_EQ(os.str().rfind("iteration,residual,curvature,objective\n1,", 0), 0u);
}

TEST(Cg, NegatedProblemFailsImmediately) {
    const TreeModel model(build_tree(6, 1.0), problems::negated(problems::example_3_7()));
    try {
        solve_open_loop_cg(OperatorContext(model), Vector::Ones(1));
        FAIL() << "expected NotUniformlyConvex";
    } catch (const NotUniformlyConvex& e) {
        EXPECT_EQ(e.iteration(), 1);
        EXPECT_LE(e.curvature(), 0.0);
    }
}

TEST(Cg, IterationLimit) {
    const TreeModel model(build_tree(8, 1.0), problems::markov_benchmark());
    EXPECT_THROW(solve_open_loop_cg(OperatorContext(model), Vector::Ones(1), 1e-14, 1), ConvergenceError);
}

TEST(ConvexityProbe, StandardConditionBoundedByR) {
    const TreeModel model(build_tree(8, 1.0), problems::standard_condition());
    const auto cert = convexity_probe(OperatorContext(model), 100, 7);
    EXPECT_EQ(cert.samples, 100);
    EXPECT_GE(cert.delta, 1.0 * (1.0 - 1e-9));
}

TEST(ConvexityProbe, Example37) {
    const TreeModel model(build_tree(8, 1.0), problems::example_3_7());
    const auto cert = convexity_probe(OperatorContext(model), 500, 8);
    EXPECT_GE(cert.delta, 1.0 - 0.05);
}

TEST(ConvexityProbe, NegativeTerminalWeight) {
    auto p = problems::zero(2, 2);
    p.coeffs.B = MatrixField::constant(Matrix::Identity(2, 2));
    p.weights.G = [](double) { return Matrix(-Matrix::Identity(2, 2)); };
    const TreeModel model(build_tree(6, 1.0), p);
    const OperatorContext ctx(model);
    const auto cert = convexity_probe(ctx, 20, 9);
    EXPECT_TRUE(cert.nonconvex_witness());
    // a single constant control gives J = -|X(T)|^2 = -[[u,u]]
    const ControlVector u(0, 5, Vector::Unit(2, 1));
    EXPECT_NEAR(ctx.cost(Vector::Zero(2), u), -1.0, 1e-14);
}

TEST(EnsembleMode, TreeEngineReproducesTreeOperators) {
    const int N = 8;
    const auto p = problems::markov_benchmark();
    const TreeModel model(build_tree(N, 1.0), p);
    const OperatorContext ctx(model);
    const auto ens = tree_ensemble(model.tree());
    const TreeEngine engine(ens);

    std::mt19937_64 rng(10);
    const auto u = random_control(ctx, rng, false);
    EnsembleControl ue(N, Matrix::Zero(static_cast<Eigen::Index>(ens.paths), 1));
    for (int k = 0; k < N; ++k)
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(ens.paths); ++i)
            ue[static_cast<std::size_t>(k)](i, 0) = u(k, static_cast<std::size_t>(i) >> (N - k))(0);

    const auto Nt = apply_N(ctx, u);
    const auto Ne = apply_N(p, engine, ue);
    const auto Lt = apply_L(ctx, Vector::Ones(1));
    const auto Le = apply_L(p, engine, Vector::Ones(1));
    double err = 0.0;
    for (int k = 0; k < N; ++k)
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(ens.paths); ++i) {
            const std::size_t node = static_cast<std::size_t>(i) >> (N - k);
            err = std::max(err, std::abs(Ne[static_cast<std::size_t>(k)](i, 0) - Nt(k, node)(0)));
            err = std::max(err, std::abs(Le[static_cast<std::size_t>(k)](i, 0) - Lt(k, node)(0)));
        }
    EXPECT_LE(err, 1e-10);
    EXPECT_NEAR(inner_product(ens, Ne, ue), inner_product(ctx, Nt, u), 1e-10);
}
