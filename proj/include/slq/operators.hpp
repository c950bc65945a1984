#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "slq/bsde.hpp"
#include "slq/core_model.hpp"
#include "slq/errors.hpp"
#include "slq/lattice.hpp"
#include "slq/sde_sim.hpp"

// The control-space view of the problem. On a tree carrier, controls are adapted node values
// on levels [t0, N-1] and
//   J(t0, xi; u) = [[N u, u]] + 2 [[L xi, u]] + E<M(t0) xi, xi>
// holds exactly, with N and L assembled from the discrete forward-backward sweep.

namespace slq {

using ControlVector = TreeProcess<Vector>;

/// Result of one forward-backward sweep along (xi, u).
struct TreeSweep {
    TreeProcess<Vector> X;
    TreeBsdeSolution<Vector> adjoint;
    ControlVector gradient;  // B'Ybar + D'Z + SX + Ru at every control node
};

class OperatorContext {
public:
    explicit OperatorContext(const TreeModel& model, int first_level = 0)
        : model_(&model), first_(first_level) {
        if (first_level < 0 || first_level >= model.depth()) {
            throw DomainError("initial level must lie in [0, N-1]");
        }
    }

    const TreeModel& model() const noexcept { return *model_; }
    int first_level() const noexcept { return first_; }
    int depth() const noexcept { return model_->depth(); }
    double t0() const noexcept { return model_->tree().time(first_); }

    ControlVector zero_control() const {
        return ControlVector(first_, depth() - 1, Vector::Zero(model_->m()));
    }

    void require_carrier(const ControlVector& u) const {
        if (u.first_level() != first_ || u.last_level() != depth() - 1) {
            throw CarrierMismatch("control lives on levels [" + std::to_string(u.first_level()) +
                                  ", " + std::to_string(u.last_level()) + "], expected [" +
                                  std::to_string(first_) + ", " + std::to_string(depth() - 1) + "]");
        }
    }

    /// Forward state from xi under u, adjoint (Y, Z) and the assembled gradient.
    TreeSweep sweep(const Vector& xi, const ControlVector& u) const {
        require_carrier(u);
        const auto& model = *model_;
        const auto& tree = model.tree();
        const int N = depth();
        TreeSweep out;
        out.X = forward_dynamics(model, u, xi, first_);
        TreeProcess<Vector> terminal(N, N, Vector::Zero(model.n()));
        for (std::size_t j = 0; j < BernoulliTree::level_size(N); ++j) {
            terminal(N, j) = model.terminal(j) * out.X(N, j);
        }
        const auto& X = out.X;
        out.adjoint = backward_bsde_tree(
            tree, terminal,
            [&](int k, std::size_t j, const Vector& ybar, const Vector& z) -> Vector {
                const auto& c = model.at(k, j);
                return c.A.transpose() * ybar + c.C.transpose() * z + c.Q * X(k, j) +
                       c.S.transpose() * u(k, j);
            },
            first_);
        out.gradient = zero_control();
        for (int k = first_; k < N; ++k) {
            for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
                const auto& c = model.at(k, j);
                out.gradient(k, j) = c.B.transpose() * out.adjoint.Ybar(k, j) +
                                     c.D.transpose() * out.adjoint.Z(k, j) + c.S * X(k, j) +
                                     c.R * u(k, j);
            }
        }
        return out;
    }

    /// Discrete cost J(t0, xi; u) averaged over the level-t0 nodes.
    double cost(const Vector& xi, const ControlVector& u) const {
        require_carrier(u);
        const auto X = forward_dynamics(*model_, u, xi, first_);
        return level_mean(cost_to_go(*model_, X, u, first_), first_);
    }

private:
    const TreeModel* model_;
    int first_;
};

/// [[u, v]] = sum_k E<u_k, v_k> dt.
inline double inner_product(const OperatorContext& ctx, const ControlVector& u,
                            const ControlVector& v) {
    ctx.require_carrier(u);
    ctx.require_carrier(v);
    double total = 0.0;
    for (int k = ctx.first_level(); k < ctx.depth(); ++k) {
        const auto& a = u.level(k);
        const auto& b = v.level(k);
        std::vector<double> terms(a.size());
        for (std::size_t j = 0; j < a.size(); ++j) terms[j] = a[j].dot(b[j]);
        total += pairwise_sum(terms) / static_cast<double>(a.size());
    }
    return total * ctx.model().tree().dt();
}

inline double control_norm(const OperatorContext& ctx, const ControlVector& u) {
    return std::sqrt(inner_product(ctx, u, u));
}

/// y += a x
inline void add_scaled(ControlVector& y, double a, const ControlVector& x) {
    for (int k = y.first_level(); k <= y.last_level(); ++k) {
        auto& yl = y.level(k);
        const auto& xl = x.level(k);
        for (std::size_t j = 0; j < yl.size(); ++j) yl[j] += a * xl[j];
    }
}

inline ControlVector linear_combination(double a, const ControlVector& x, double b,
                                        const ControlVector& y) {
    ControlVector out = x;
    for (int k = out.first_level(); k <= out.last_level(); ++k) {
        auto& ol = out.level(k);
        const auto& yl = y.level(k);
        for (std::size_t j = 0; j < ol.size(); ++j) ol[j] = a * ol[j] + b * yl[j];
    }
    return out;
}

/// [N u](s) = B'Y + D'Z + SX + Ru along the sweep from zero initial state.
inline ControlVector apply_N(const OperatorContext& ctx, const ControlVector& u) {
    return ctx.sweep(Vector::Zero(ctx.model().n()), u).gradient;
}

/// [L xi](s) = B'Y + D'Z + SX along the uncontrolled sweep from xi.
inline ControlVector apply_L(const OperatorContext& ctx, const Vector& xi) {
    return ctx.sweep(xi, ctx.zero_control()).gradient;
}

/// Exact discrete kernel of the uncontrolled cost, x' M_k x = E[cost from node | X_k = x, u = 0]:
///   M_k = Mbar + (Mbar A + A'Mbar + C'Mbar C + NC + C'N + Q) dt + (A'Mbar A + A'NC + C'NA) dt^2
/// with Mbar = E[M_{k+1}|node] and N = E[M_{k+1} dW|node]/dt.
inline TreeProcess<Matrix> uncontrolled_cost_kernel(const TreeModel& model) {
    const auto& tree = model.tree();
    const int N = tree.depth(), n = model.n();
    TreeProcess<Matrix> M(0, N, Matrix::Zero(n, n));
    for (std::size_t j = 0; j < BernoulliTree::level_size(N); ++j) M(N, j) = model.terminal(j);
    const double dt = tree.dt();
    for (int k = N - 1; k >= 0; --k) {
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            const auto& c = model.at(k, j);
            const Matrix Mb = cond_expect(M, k, j);
            const Matrix Nk = cond_expect_increment(tree, M, k, j) / dt;
            const Matrix first = Mb * c.A + c.A.transpose() * Mb + c.C.transpose() * Mb * c.C +
                                 Nk * c.C + c.C.transpose() * Nk + c.Q;
            const Matrix second = c.A.transpose() * Mb * c.A + c.A.transpose() * Nk * c.C +
                                  c.C.transpose() * Nk * c.A;
            M(k, j) = symmetrized(Mb + first * dt + second * dt * dt);
        }
    }
    return M;
}

struct CgTraceRow {
    int iteration = 0;
    double residual = 0.0;   // [[r, r]]^{1/2}
    double curvature = 0.0;  // [[N d, d]] / [[d, d]]
    double objective = 0.0;  // 1/2 [[N u, u]] - [[b, u]], decreases monotonically
};

struct CgResult {
    ControlVector u;
    int iterations = 0;
    double residual = 0.0;      // true residual norm [[Nu + L xi, Nu + L xi]]^{1/2}
    double rhs_norm = 0.0;      // [[L xi, L xi]]^{1/2}
    std::vector<CgTraceRow> trace;
};

/// Conjugate gradient for N u = -L xi in the control inner product. Stops when the residual
/// norm is at most tol * |L xi|.
inline CgResult solve_open_loop_cg(const OperatorContext& ctx, const Vector& xi, double tol = 1e-12,
                                   int max_iter = 1000) {
    CgResult res;
    res.u = ctx.zero_control();
    ControlVector r = apply_L(ctx, xi);
    for (int k = r.first_level(); k <= r.last_level(); ++k)
        for (auto& v : r.level(k)) v = -v;  // r = b - N*0 with b = -L xi
    const ControlVector b = r;
    res.rhs_norm = control_norm(ctx, b);
    if (res.rhs_norm == 0.0) return res;

    ControlVector d = r;
    double rr = inner_product(ctx, r, r);
    double objective = 0.0;
    const double target = tol * res.rhs_norm;
    for (int it = 1; it <= max_iter; ++it) {
        const ControlVector Nd = apply_N(ctx, d);
        const double dd = inner_product(ctx, d, d);
        const double curvature = inner_product(ctx, Nd, d);
        if (!(curvature > 0.0)) throw NotUniformlyConvex(it, curvature / dd);
        const double alpha = rr / curvature;
        add_scaled(res.u, alpha, d);
        add_scaled(r, -alpha, Nd);
        objective -= 0.5 * rr * rr / curvature;
        const double rr_new = inner_product(ctx, r, r);
        res.iterations = it;
        res.trace.push_back({it, std::sqrt(rr_new), curvature / dd, objective});
        if (std::sqrt(rr_new) <= target) break;
        if (it == max_iter) throw ConvergenceError(it, std::sqrt(rr_new));
        d = linear_combination(1.0, r, rr_new / rr, d);
        rr = rr_new;
    }
    ControlVector true_res = apply_N(ctx, res.u);
    add_scaled(true_res, -1.0, b);
    res.residual = control_norm(ctx, true_res);
    return res;
}

inline void write_cg_trace_csv(std::ostream& os, const std::vector<CgTraceRow>& trace) {
    const auto old = os.precision(17);
    os << "iteration,residual,curvature,objective\n";
    for (const auto& row : trace)
        os << row.iteration << ',' << row.residual << ',' << row.curvature << ',' << row.objective << '\n';
    os.precision(old);
}

/// Random adapted control with [[u, u]] = 1. `smooth` draws u_k = a + b t_k + c w(k, j) with
/// Gaussian a, b, c; otherwise every node value is i.i.d. Gaussian.
inline ControlVector random_control(const OperatorContext& ctx, std::mt19937_64& rng, bool smooth) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto& tree = ctx.model().tree();
    const int m = ctx.model().m();
    ControlVector u = ctx.zero_control();
    Vector a(m), b(m), c(m);
    if (smooth) {
        for (int i = 0; i < m; ++i) {
            a(i) = normal(rng);
            b(i) = normal(rng);
            c(i) = normal(rng);
        }
    }
    for (int k = ctx.first_level(); k < ctx.depth(); ++k) {
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            if (smooth) {
                u(k, j) = a + b * tree.time(k) + c * tree.w(k, j);
            } else {
                for (int i = 0; i < m; ++i) u(k, j)(i) = normal(rng);
            }
        }
    }
    const double norm = control_norm(ctx, u);
    if (norm > 0.0) {
        for (int k = u.first_level(); k <= u.last_level(); ++k)
            for (auto& v : u.level(k)) v /= norm;
    }
    return u;
}

struct ConvexityCertificate {
    double delta = std::numeric_limits<double>::infinity();  // min [[Nu,u]]/[[u,u]] over samples
    int samples = 0;
    double t0 = 0.0;

    bool nonconvex_witness() const noexcept { return delta < 0.0; }
};

/// Minimum Rayleigh quotient of N over random adapted controls; every tenth sample is smooth.
inline ConvexityCertificate convexity_probe(const OperatorContext& ctx, int n_samples,
                                            std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ConvexityCertificate cert;
    cert.t0 = ctx.t0();
    for (int s = 0; s < n_samples; ++s) {
        const ControlVector u = random_control(ctx, rng, s % 10 == 9);
        const double uu = inner_product(ctx, u, u);
        if (uu == 0.0) continue;
        cert.delta = std::min(cert.delta, inner_product(ctx, apply_N(ctx, u), u) / uu);
        ++cert.samples;
    }
    return cert;
}

// Ensemble mode: same operators with regression conditional expectations. Diagnostics only;
// regression noise breaks exact self-adjointness.

/// Per-step control tables (paths x m) on an ensemble.
using EnsembleControl = std::vector<Matrix>;

template <ExpectationEngine Engine>
EnsembleControl ensemble_gradient(const LQProblem& p, const Engine& engine, const Vector& xi,
                                  const EnsembleControl& u) {
    const auto& ens = engine.ensemble();
    const StateEnsemble se = simulate(p, OpenLoopTable{u}, xi, ens);
    const BackwardSolution adj = solve_adjoint(p, engine, se);
    EnsembleControl g(u.size());
    const auto rows = static_cast<Eigen::Index>(ens.paths);
    for (int k = 0; k < ens.steps; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        g[ks].resize(rows, p.dims.m);
        for (Eigen::Index i = 0; i < rows; ++i) {
            const auto c = p.eval_all(ens.time(k), ens.W(i, k));
            g[ks].row(i) = (c.B.transpose() * adj.Ybar[ks].row(i).transpose() +
                            c.D.transpose() * adj.Z[ks].row(i).transpose() +
                            c.S * se.X[ks].row(i).transpose() + c.R * u[ks].row(i).transpose())
                               .transpose();
        }
    }
    return g;
}

template <ExpectationEngine Engine>
EnsembleControl apply_N(const LQProblem& p, const Engine& engine, const EnsembleControl& u) {
    return ensemble_gradient(p, engine, Vector::Zero(p.dims.n), u);
}

template <ExpectationEngine Engine>
EnsembleControl apply_L(const LQProblem& p, const Engine& engine, const Vector& xi) {
    const auto& ens = engine.ensemble();
    EnsembleControl zero(static_cast<std::size_t>(ens.steps),
                         Matrix::Zero(static_cast<Eigen::Index>(ens.paths), p.dims.m));
    return ensemble_gradient(p, engine, xi, zero);
}

inline double inner_product(const PathEnsemble& ens, const EnsembleControl& u,
                            const EnsembleControl& v) {
    if (u.size() != v.size() || u.size() != static_cast<std::size_t>(ens.steps)) {
        throw CarrierMismatch("ensemble controls have different step counts");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
        const Vector per_path = u[k].cwiseProduct(v[k]).rowwise().sum();
        total += pairwise_sum({per_path.data(), static_cast<std::size_t>(per_path.size())}) /
                 static_cast<double>(ens.paths);
    }
    return total * ens.dt;
}

}  // namespace slq
