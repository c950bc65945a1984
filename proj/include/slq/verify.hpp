#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "slq/bsde.hpp"
#include "slq/lattice.hpp"
#include "slq/operators.hpp"
#include "slq/riccati.hpp"
#include "slq/sde_sim.hpp"

// Numerical checks of the structural identities of the SLQ problem. Each check returns a
// CheckReport whose residuals carry their own tolerances; a report passes iff every
// residual is within tolerance.

namespace slq {

struct Residual {
    std::string label;
    double value = 0.0;
    double tolerance = 0.0;

    bool passed() const noexcept { return value <= tolerance; }
};

struct CheckReport {
    std::string name;
    std::vector<Residual> residuals;
    std::vector<std::pair<std::string, double>> metrics;  // informational only
    std::string carrier;
    bool expected_failure = false;

    bool passed() const {
        return std::all_of(residuals.begin(), residuals.end(),
                           [](const Residual& r) { return r.passed(); });
    }
    /// An expected failure is "ok" when it fails.
    bool ok() const { return expected_failure ? !passed() : passed(); }

    void add(std::string label, double value, double tolerance) {
        residuals.push_back({std::move(label), value, tolerance});
    }
    void metric(std::string label, double value) { metrics.emplace_back(std::move(label), value); }
};

inline std::string tree_carrier(const OperatorContext& ctx) {
    return "tree depth " + std::to_string(ctx.depth()) + " t0-level " + std::to_string(ctx.first_level());
}

/// sup over control nodes of |B'Y + D'Z + SX + Ru| along (xi, u).
inline CheckReport check_stationarity(const OperatorContext& ctx, const Vector& xi,
                                      const ControlVector& u, double tol = 1e-8) {
    const auto sweep = ctx.sweep(xi, u);
    double sup = 0.0;
    for (int k = ctx.first_level(); k < ctx.depth(); ++k)
        for (const auto& g : sweep.gradient.level(k)) sup = std::max(sup, g.norm());
    CheckReport r{"stationarity", {}, {}, tree_carrier(ctx)};
    r.add("sup |B'Y+D'Z+SX+Ru|", sup, tol);
    return r;
}

/// Path-max stationarity residual on an ensemble (regression conditional expectations).
template <ExpectationEngine Engine>
CheckReport check_stationarity(const LQProblem& p, const Engine& engine, const Vector& xi,
                               const EnsembleControl& u, double tol) {
    const auto g = ensemble_gradient(p, engine, xi, u);
    double sup = 0.0;
    for (const auto& gk : g) sup = std::max(sup, gk.rowwise().norm().maxCoeff());
    CheckReport r{"stationarity", {}, {}, "ensemble " + std::to_string(engine.ensemble().paths) + " paths"};
    r.add("max |B'Y+D'Z+SX+Ru|", sup, tol);
    return r;
}

/// |J(t0, xi; u*) - xi'P(t0)xi| and |J(t0, xi; u*) - <Y*(t0), xi>|.
inline CheckReport check_value_representation(const OperatorContext& ctx, const Vector& xi,
                                              const ControlVector& u_opt,
                                              const TreeProcess<Matrix>& P, double tol = 0.05) {
    const int k0 = ctx.first_level();
    const auto sweep = ctx.sweep(xi, u_opt);
    const double J = level_mean(cost_to_go(ctx.model(), sweep.X, u_opt, k0), k0);
    const double riccati = xi.dot(level_mean(P, k0) * xi);
    const double adjoint = level_mean(sweep.adjoint.Y, k0).dot(xi);
    CheckReport r{"value_representation", {}, {}, tree_carrier(ctx)};
    r.add("|J - xi'P xi|", std::abs(J - riccati), tol);
    r.add("|J - <Y(t0), xi>|", std::abs(J - adjoint), tol);
    r.metric("J", J);
    r.metric("xi'P xi", riccati);
    r.metric("<Y(t0),xi>", adjoint);
    return r;
}

/// Simulates the feedback u = Theta X on the tree and compares with an open-loop optimum.
inline CheckReport check_closed_loop_agreement(const OperatorContext& ctx, const Vector& xi,
                                               const ControlVector& u_open,
                                               const TreeProcess<Matrix>& theta,
                                               double tol_cost, double tol_path) {
    const int k0 = ctx.first_level();
    const auto loop = simulate_feedback(ctx.model(), theta, xi, k0);
    double path = 0.0;
    for (int k = k0; k < ctx.depth(); ++k) {
        const auto& a = u_open.level(k);
        const auto& b = loop.u.level(k);
        for (std::size_t j = 0; j < a.size(); ++j) path = std::max(path, (a[j] - b[j]).cwiseAbs().maxCoeff());
    }
    const double J_open = ctx.cost(xi, u_open);
    const double J_loop = level_mean(cost_to_go(ctx.model(), loop.X, loop.u, k0), k0);
    CheckReport r{"closed_loop_agreement", {}, {}, tree_carrier(ctx)};
    r.add("|J(u_open) - J(Theta X)|", std::abs(J_open - J_loop), tol_cost);
    r.add("max |u_open - Theta X|", path, tol_path);
    r.metric("J(u_open)", J_open);
    r.metric("J(Theta X)", J_loop);
    return r;
}

/// Builds the matrix optimal pair (X, Y) column by column from n open-loop optima with
/// xi = e_1..e_n and compares Y X^{-1} with P at every node of levels t0..N.
inline CheckReport check_yx_identity(const OperatorContext& ctx, const TreeProcess<Matrix>& P,
                                     double tol = 0.05, double cg_tol = 1e-12,
                                     const TreeProcess<Matrix>* P_secondary = nullptr) {
    const int n = ctx.model().n(), N = ctx.depth(), k0 = ctx.first_level();
    std::vector<TreeSweep> sweeps;
    for (int i = 0; i < n; ++i) {
        const Vector e = Vector::Unit(n, i);
        const auto cg = solve_open_loop_cg(ctx, e, cg_tol);
        sweeps.push_back(ctx.sweep(e, cg.u));
    }
    double residual = 0.0, secondary = 0.0, min_det = std::numeric_limits<double>::infinity();
    double max_cond = 0.0;
    int singular = 0;
    for (int k = k0; k <= N; ++k) {
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            Matrix XX(n, n), YY(n, n);
            for (int i = 0; i < n; ++i) {
                XX.col(i) = sweeps[static_cast<std::size_t>(i)].X(k, j);
                YY.col(i) = sweeps[static_cast<std::size_t>(i)].adjoint.Y(k, j);
            }
            Eigen::JacobiSVD<Matrix> svd(XX);
            const auto sv = svd.singularValues();
            const double cond = sv(n - 1) > 0.0 ? sv(0) / sv(n - 1) : std::numeric_limits<double>::infinity();
            max_cond = std::max(max_cond, cond);
            min_det = std::min(min_det, std::abs(XX.determinant()));
            if (!(cond <= 1e12)) {
                ++singular;
                continue;
            }
            const Matrix ratio = YY * XX.inverse();
            residual = std::max(residual, (ratio - P(k, j)).cwiseAbs().maxCoeff());
            if (P_secondary) secondary = std::max(secondary, (ratio - (*P_secondary)(k, j)).cwiseAbs().maxCoeff());
        }
    }
    CheckReport r{"yx_identity", {}, {}, tree_carrier(ctx)};
    r.add("max |Y X^-1 - P|", residual, tol);
    r.add("singular X nodes", singular, 0.0);
    r.metric("min |det X|", min_det);
    r.metric("max cond X", max_cond);
    if (P_secondary) r.metric("max |Y X^-1 - P_dp|", secondary);
    return r;
}

/// At every node of level k_mid, re-solves the subtree problem by DP from X*(node) and compares
/// with the cost-to-go of the restricted control.
inline CheckReport check_optimality_principle(const OperatorContext& ctx, const Vector& xi,
                                              const ControlVector& u, int k_mid, double tol = 1e-9) {
    const int k0 = ctx.first_level();
    if (k_mid < k0 || k_mid >= ctx.depth()) throw DomainError("k_mid outside the control levels");
    const auto X = forward_dynamics(ctx.model(), u, xi, k0);
    const auto C = cost_to_go(ctx.model(), X, u, k0);
    double residual = 0.0, gap_sum = 0.0;
    const std::size_t width = BernoulliTree::level_size(k_mid);
    for (std::size_t j = 0; j < width; ++j) {
        const Matrix Psub = dp_subtree_value(ctx.model(), k_mid, j);
        const double value = X(k_mid, j).dot(Psub * X(k_mid, j));
        const double gap = C(k_mid, j) - value;
        residual = std::max(residual, std::abs(gap));
        gap_sum += gap;
    }
    CheckReport r{"optimality_principle", {}, {}, tree_carrier(ctx) + " k_mid " + std::to_string(k_mid)};
    r.add("max |subtree value - restricted cost-to-go|", residual, tol);
    r.metric("mean value gap at k_mid", gap_sum / static_cast<double>(width));
    return r;
}

/// Open-loop optimality J(u* + eps v) >= J(u*) over random adapted v, eps cycling through
/// {0.01, 0.1, 1}; also checks the exact quadratic gap J(u*+eps v) - J(u*) = eps^2 [[Nv, v]].
inline CheckReport check_cost_perturbation(const OperatorContext& ctx, const Vector& xi,
                                           const ControlVector& u_opt, int n_perturb,
                                           std::uint64_t seed, double tol = 1e-9,
                                           double gap_law_tol = 1e-8) {
    constexpr std::array<double, 3> eps{0.01, 0.1, 1.0};
    std::mt19937_64 rng(seed);
    const double base = ctx.cost(xi, u_opt);
    double min_gap = std::numeric_limits<double>::infinity(), law = 0.0;
    for (int i = 0; i < n_perturb; ++i) {
        const ControlVector v = random_control(ctx, rng, i % 10 == 9);
        const double e = eps[static_cast<std::size_t>(i) % eps.size()];
        const double gap = ctx.cost(xi, linear_combination(1.0, u_opt, e, v)) - base;
        const double predicted = e * e * inner_product(ctx, apply_N(ctx, v), v);
        min_gap = std::min(min_gap, gap);
        law = std::max(law, std::abs(gap - predicted));
    }
    CheckReport r{"cost_perturbation", {}, {}, tree_carrier(ctx)};
    r.add("-min gap", -min_gap, tol);
    r.add("max |gap - eps^2 [[Nv,v]]|", law, gap_law_tol);
    r.metric("J(u*)", base);
    r.metric("min gap", min_gap);
    return r;
}

/// Monte Carlo version around a feedback policy using common random numbers. Perturbations are
/// adapted feed-forward terms v(t, W) = a + b t + c sin(W), normalized to unit L2 norm on the
/// grid. Passes iff every gap >= -3 stderr.
inline CheckReport check_cost_perturbation(const LQProblem& p, const PathEnsemble& ens,
                                           const FeedbackPolicy& policy, const Vector& xi,
                                           int n_perturb, std::uint64_t seed) {
    constexpr std::array<double, 3> eps{0.01, 0.1, 1.0};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Vector base = path_costs(p, ens, simulate(p, policy, xi, ens));
    const int m = p.dims.m;
    double margin = -std::numeric_limits<double>::infinity(), min_gap = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_perturb; ++i) {
        Vector a(m), b(m), c(m);
        for (int l = 0; l < m; ++l) {
            a(l) = normal(rng);
            b(l) = normal(rng);
            c(l) = normal(rng);
        }
        const double scale = std::sqrt(a.squaredNorm() + b.squaredNorm() + c.squaredNorm());
        const double e = eps[static_cast<std::size_t>(i) % eps.size()] / scale;
        FeedbackPolicy perturbed = policy;
        perturbed.feedforward = [a, b, c, e, prev = policy.feedforward](int k, double t, double w) {
            Vector v = e * (a + b * t + c * std::sin(w));
            if (prev) v += prev(k, t, w);
            return v;
        };
        const Vector cost = path_costs(p, ens, simulate(p, perturbed, xi, ens));
        const auto diff = summarize(cost - base);
        margin = std::max(margin, -diff.mean - 3.0 * diff.std_error);
        min_gap = std::min(min_gap, diff.mean);
    }
    CheckReport r{"cost_perturbation", {}, {}, "ensemble " + std::to_string(ens.paths) + " paths"};
    r.add("max(-gap - 3 stderr)", margin, 0.0);
    r.metric("min gap", min_gap);
    return r;
}

/// Passes iff the probed convexity constant is positive.
inline CheckReport check_convexity(const OperatorContext& ctx, int n_samples, std::uint64_t seed) {
    const auto cert = convexity_probe(ctx, n_samples, seed);
    CheckReport r{"convexity_probe", {}, {}, tree_carrier(ctx)};
    r.add("-delta", -cert.delta, 0.0);
    r.metric("delta", cert.delta);
    r.metric("samples", cert.samples);
    return r;
}

/// Passes iff CG on N u = -L xi converges without meeting non-positive curvature.
inline CheckReport check_cg_solvable(const OperatorContext& ctx, const Vector& xi, double tol = 1e-12) {
    CheckReport r{"cg_solvable", {}, {}, tree_carrier(ctx)};
    try {
        const auto cg = solve_open_loop_cg(ctx, xi, tol);
        r.add("relative residual", cg.rhs_norm > 0.0 ? cg.residual / cg.rhs_norm : 0.0, tol * 10.0);
        r.metric("iterations", cg.iterations);
    } catch (const NotUniformlyConvex& e) {
        r.add("not uniformly convex", 1.0, 0.0);
        r.metric("curvature", e.curvature());
        r.metric("iteration", e.iteration());
    } catch (const ConvergenceError& e) {
        r.add("not converged", e.residual(), 0.0);
    }
    return r;
}

/// Rows: check,label,value,tolerance,pass,expected_failure,carrier (metrics have empty tolerance).
inline void write_reports_csv(std::ostream& os, const std::vector<CheckReport>& reports) {
    const auto old = os.precision(17);
    os << "check,label,value,tolerance,pass,expected_failure,carrier\n";
    auto quoted = [](const std::string& s) { return '"' + s + '"'; };
    for (const auto& r : reports) {
        for (const auto& res : r.residuals) {
            os << r.name << ',' << quoted(res.label) << ',' << res.value << ',' << res.tolerance << ','
               << (res.passed() ? 1 : 0) << ',' << (r.expected_failure ? 1 : 0) << ','
               << quoted(r.carrier) << '\n';
        }
        for (const auto& [label, value] : r.metrics) {
            os << r.name << ',' << quoted(label) << ',' << value << ",,,"
               << (r.expected_failure ? 1 : 0) << ',' << quoted(r.carrier) << '\n';
        }
    }
    os.precision(old);
}

inline void write_summary(std::ostream& os, const std::vector<CheckReport>& reports) {
    for (const auto& r : reports) {
        os << (r.ok() ? "[ ok ] " : "[FAIL] ") << r.name;
        if (r.expected_failure) os << " (expected failure: " << (r.passed() ? "did not fail" : "failed") << ")";
        os << "  {" << r.carrier << "}\n";
        for (const auto& res : r.residuals) {
            os << "         " << res.label << " = " << res.value << "  (tol " << res.tolerance << ")\n";
        }
        for (const auto& [label, value] : r.metrics) os << "         " << label << " = " << value << '\n';
    }
}

}  // namespace slq
