#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "slq/core_model.hpp"
#include "slq/errors.hpp"
#include "slq/regression.hpp"
#include "slq/sde_sim.hpp"

// Backward solvers on path ensembles. Conditional expectations come from an engine:
// RegressionEngine (least-squares Monte Carlo) or TreeEngine (exact group averages over the
// leaves of a Bernoulli tree). Both run the same explicit schemes.

namespace slq {

struct RegressionDiagnostic {
    int step = 0;
    std::string label;
    double condition_number = 1.0;
    double residual_rms = 0.0;
};

template <class E>
concept ExpectationEngine = requires(const E& e, int k, const Matrix& y, const Matrix* x) {
    { e.fit(k, y, x, std::string{}) } -> std::same_as<RegressionFit>;
    { e.ensemble() } -> std::same_as<const PathEnsemble&>;
};

class RegressionEngine {
public:
    RegressionEngine(const PathEnsemble& ens, RegressionBasis basis) : ens_(&ens), basis_(basis) {}

    const PathEnsemble& ensemble() const noexcept { return *ens_; }
    const RegressionBasis& basis() const noexcept { return basis_; }

    /// Regresses step-(k+1) targets on features of (W(t_k), state_k).
    RegressionFit fit(int k, const Matrix& targets, const Matrix* state,
                      const std::string& label) const {
        RegressionFit f;
        try {
            f = regress(basis_.features(ens_->W.col(k), state), targets);
        } catch (const RegressionError& e) {
            throw RegressionError(label + " at step " + std::to_string(k) + ": " + e.what());
        }
        diagnostics_.push_back({k, label, f.condition_number, f.residual_rms});
        return f;
    }

    const std::vector<RegressionDiagnostic>& diagnostics() const noexcept { return diagnostics_; }

private:
    const PathEnsemble* ens_;
    RegressionBasis basis_;
    mutable std::vector<RegressionDiagnostic> diagnostics_;
};

/// Exact conditional expectation on a tree ensemble: average over the 2^(N-k) leaves that
/// share the level-k node.
class TreeEngine {
public:
    explicit TreeEngine(const PathEnsemble& ens) : ens_(&ens) {
        if (!ens.is_tree()) throw CarrierMismatch("TreeEngine requires a tree ensemble");
    }

    const PathEnsemble& ensemble() const noexcept { return *ens_; }

    RegressionFit fit(int k, const Matrix& targets, const Matrix*, const std::string&) const {
        const auto group = Eigen::Index{1} << (ens_->tree_depth - k);
        RegressionFit f;
        f.fitted.resize(targets.rows(), targets.cols());
        for (Eigen::Index start = 0; start < targets.rows(); start += group) {
            const Eigen::RowVectorXd mean = targets.middleRows(start, group).colwise().mean();
            f.fitted.middleRows(start, group) = mean.replicate(group, 1);
        }
        f.residual_rms = std::sqrt((targets - f.fitted).squaredNorm() /
                                   static_cast<double>(targets.rows()));
        return f;
    }

    std::vector<RegressionDiagnostic> diagnostics() const { return {}; }

private:
    const PathEnsemble* ens_;
};

namespace detail {

inline Matrix row_to_matrix(const Eigen::Ref<const Eigen::RowVectorXd>& row, int n) {
    Matrix out(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) out(r, c) = row(r * n + c);
    return out;
}

inline Eigen::RowVectorXd matrix_to_row(const Matrix& m) {
    Eigen::RowVectorXd out(m.size());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) out(r * m.cols() + c) = m(r, c);
    return out;
}

/// Returns (E[V | F_k], E[V dW | F_k] / dt). The second projection regresses the centered
/// product (V - E[V | F_k]) dW, which has the same conditional mean and far less variance.
/// When requested, fit_out holds both coefficient tables side by side (p x 2q).
template <ExpectationEngine Engine>
std::pair<Matrix, Matrix> project_with_increment(const Engine& engine, int k, const Matrix& next,
                                                 const Matrix* state, const std::string& label,
                                                 RegressionFit* fit_out = nullptr) {
    const auto& ens = engine.ensemble();
    const Vector dW = ens.increment(k);
    RegressionFit mean_fit = engine.fit(k, next, state, label);
    const Matrix centered = (next - mean_fit.fitted).array().colwise() * dW.array();
    RegressionFit incr_fit = engine.fit(k, centered, state, label + " increment");
    std::pair<Matrix, Matrix> out{std::move(mean_fit.fitted), incr_fit.fitted / ens.dt};
    if (fit_out) {
        fit_out->condition_number = std::max(mean_fit.condition_number, incr_fit.condition_number);
        fit_out->residual_rms = mean_fit.residual_rms;
        if (mean_fit.coefficients.size() > 0) {
            fit_out->coefficients.resize(mean_fit.coefficients.rows(), 2 * next.cols());
            fit_out->coefficients << mean_fit.coefficients, incr_fit.coefficients;
        }
    }
    return out;
}

}  // namespace detail

/// Y[k], Z[k], Ybar[k] are paths x n; Ybar[k] is the estimate of E[Y_{k+1} | F_k].
struct BackwardSolution {
    std::vector<Matrix> Y;     // steps + 1
    std::vector<Matrix> Z;     // steps
    std::vector<Matrix> Ybar;  // steps
};

/// Adjoint BSDE dY = -(A'Y + C'Z + QX + S'u) ds + Z dW, Y(T) = G X(T), explicit scheme
///   Z_k = E[Y_{k+1} dW_k | F_k]/dt,  Y_k = Ybar_k + (A'Ybar_k + C'Z_k + QX_k + S'u_k) dt.
template <ExpectationEngine Engine>
BackwardSolution solve_adjoint(const LQProblem& p, const Engine& engine, const StateEnsemble& se) {
    const auto& ens = engine.ensemble();
    const int N = ens.steps;
    const auto rows = static_cast<Eigen::Index>(ens.paths);
    if (se.X.size() != static_cast<std::size_t>(N + 1) || se.u.size() != static_cast<std::size_t>(N)) {
        throw CarrierMismatch("state ensemble does not match the engine's grid");
    }
    BackwardSolution sol;
    sol.Y.resize(static_cast<std::size_t>(N + 1));
    sol.Z.resize(static_cast<std::size_t>(N));
    sol.Ybar.resize(static_cast<std::size_t>(N));

    const Matrix& XN = se.X.back();
    if (!p.weights.G_random) {
        sol.Y.back() = XN * p.terminal(0.0);
    } else {
        sol.Y.back().resize(rows, p.dims.n);
        for (Eigen::Index i = 0; i < rows; ++i) {
            sol.Y.back().row(i) = XN.row(i) * p.terminal(ens.W(i, N));
        }
    }

    const bool shared = detail::coefficients_shared(p) && detail::weights_shared(p);
    for (int k = N - 1; k >= 0; --k) {
        const auto ks = static_cast<std::size_t>(k);
        const Matrix& X = se.X[ks];
        const Matrix& U = se.u[ks];
        auto [ybar, z] = detail::project_with_increment(engine, k, sol.Y[ks + 1], &X, "adjoint");
        Matrix Y(rows, p.dims.n);
        const double t = ens.time(k);
        if (shared) {
            const auto c = p.eval_all(t, 0.0);
            Y = ybar + (ybar * c.A + z * c.C + X * c.Q + U * c.S) * ens.dt;
        } else {
            for (Eigen::Index i = 0; i < rows; ++i) {
                const auto c = p.eval_all(t, ens.W(i, k));
                Y.row(i) = ybar.row(i) +
                           (ybar.row(i) * c.A + z.row(i) * c.C + X.row(i) * c.Q + U.row(i) * c.S) *
                               ens.dt;
            }
        }
        sol.Y[ks] = std::move(Y);
        sol.Ybar[ks] = std::move(ybar);
        sol.Z[ks] = std::move(z);
    }
    return sol;
}

/// Uniform bound on |M| implied by the declared coefficient bounds:
/// K with |MA + A'M + C'MC + NC + C'N + Q| <= K(|M| + |N| + 1), beta = K^2 + 2K,
/// bound = e^{beta T} (|G|^2 + 2KT)^{1/2} (Frobenius norms).
inline double mn_analytic_bound(const LQProblem& p) {
    const double n = p.dims.n;
    const double a = n * p.coeffs.bound, c = n * p.coeffs.bound;
    const double q = n * p.weights.bound, g = n * p.weights.bound;
    const double K = std::max({2.0 * a + c * c, 2.0 * c, q, 1e-300});
    const double beta = K * K + 2.0 * K;
    return std::exp(beta * p.horizon) * std::sqrt(g * g + 2.0 * K * p.horizon);
}

/// (M, N) sampled per path; row i of M[k] holds M(t_k) on path i flattened row-major.
struct MNSolution {
    std::vector<Matrix> M;  // steps + 1, paths x n^2
    std::vector<Matrix> N;  // steps
    int n = 1;
    double max_norm = 0.0;       // largest Frobenius norm of sampled M
    double analytic_bound = 0.0;
    bool bound_flagged = false;  // max_norm > 10 x analytic_bound
    double max_asymmetry = 0.0;

    Matrix M_at(int k, Eigen::Index path) const {
        return detail::row_to_matrix(M[static_cast<std::size_t>(k)].row(path), n);
    }
    Matrix N_at(int k, Eigen::Index path) const {
        return detail::row_to_matrix(N[static_cast<std::size_t>(k)].row(path), n);
    }
};

/// dM = -(MA + A'M + C'MC + NC + C'N + Q) ds + N dW, M(T) = G, explicit scheme with the
/// driver evaluated at Mbar_k = E[M_{k+1} | F_k]; M symmetrized each step.
template <ExpectationEngine Engine>
MNSolution solve_mn(const LQProblem& p, const Engine& engine) {
    const auto& ens = engine.ensemble();
    const int steps = ens.steps, n = p.dims.n;
    const auto rows = static_cast<Eigen::Index>(ens.paths);
    MNSolution sol;
    sol.n = n;
    sol.M.resize(static_cast<std::size_t>(steps + 1));
    sol.N.resize(static_cast<std::size_t>(steps));

    Matrix& MT = sol.M.back();
    MT.resize(rows, n * n);
    for (Eigen::Index i = 0; i < rows; ++i) {
        MT.row(i) = detail::matrix_to_row(p.terminal(p.weights.G_random ? ens.W(i, steps) : 0.0));
    }

    const bool shared = detail::coefficients_shared(p) && detail::weights_shared(p);
    for (int k = steps - 1; k >= 0; --k) {
        const auto ks = static_cast<std::size_t>(k);
        auto [mbar, nk] = detail::project_with_increment(engine, k, sol.M[ks + 1], nullptr, "MN");
        Matrix Mk(rows, n * n);
        const double t = ens.time(k);
        CoefficientBundle c;
        if (shared) c = p.eval_all(t, 0.0);
        for (Eigen::Index i = 0; i < rows; ++i) {
            if (!shared) c = p.eval_all(t, ens.W(i, k));
            const Matrix Mb = detail::row_to_matrix(mbar.row(i), n);
            const Matrix Nk = symmetrized(detail::row_to_matrix(nk.row(i), n));
            const Matrix driver = Mb * c.A + c.A.transpose() * Mb + c.C.transpose() * Mb * c.C +
                                  Nk * c.C + c.C.transpose() * Nk + c.Q;
            Mk.row(i) = detail::matrix_to_row(symmetrized(Mb + driver * ens.dt));
            nk.row(i) = detail::matrix_to_row(Nk);
        }
        sol.M[ks] = std::move(Mk);
        sol.N[ks] = std::move(nk);
    }

    for (int k = 0; k <= steps; ++k) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            const Matrix Mi = sol.M_at(k, i);
            sol.max_norm = std::max(sol.max_norm, Mi.norm());
            sol.max_asymmetry = std::max(sol.max_asymmetry, (Mi - Mi.transpose()).cwiseAbs().maxCoeff());
        }
    }
    sol.analytic_bound = mn_analytic_bound(p);
    sol.bound_flagged = sol.max_norm > 10.0 * sol.analytic_bound;
    return sol;
}

/// Rows: step,label,condition_number,residual_rms.
inline void write_diagnostics_csv(std::ostream& os, const std::vector<RegressionDiagnostic>& diags) {
    const auto old = os.precision(17);
    os << "step,label,condition_number,residual_rms\n";
    for (const auto& d : diags)
        os << d.step << ',' << d.label << ',' << d.condition_number << ',' << d.residual_rms << '\n';
    os.precision(old);
}

}  // namespace slq
