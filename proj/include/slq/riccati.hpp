#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "slq/bsde.hpp"
#include "slq/core_model.hpp"
#include "slq/errors.hpp"
#include "slq/lattice.hpp"
#include "slq/sde_sim.hpp"

namespace slq {

inline constexpr double riccati_condition_limit = 1e12;

struct GainResult {
    Matrix theta;              // m x n
    double lambda_min = 0.0;   // smallest eigenvalue of R + D'PD
    double condition = 1.0;    // |lambda|_max / |lambda|_min of R + D'PD
};

/// Theta = -(R + D'PD)^{-1} (B'P + D'PC + D'Lambda + S); both factors zero gives Theta = 0.
inline GainResult feedback_gain(const Matrix& P, const Matrix& Lambda, const CoefficientBundle& c) {
    const Matrix H = symmetrized(c.R + c.D.transpose() * P * c.D);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(H, Eigen::EigenvaluesOnly);
    const auto ev = eig.eigenvalues();
    const double abs_min = ev.cwiseAbs().minCoeff(), abs_max = ev.cwiseAbs().maxCoeff();
    GainResult out;
    out.lambda_min = ev.minCoeff();
    out.condition = abs_min > 0.0 ? abs_max / abs_min : std::numeric_limits<double>::infinity();
    const Matrix K = c.B.transpose() * P + c.D.transpose() * P * c.C + c.D.transpose() * Lambda + c.S;
    if (H.isZero(0.0) && K.isZero(0.0)) {
        out.theta = Matrix::Zero(c.R.rows(), P.rows());  // control does not enter the cost
        return out;
    }
    if (!(out.condition <= riccati_condition_limit)) {
        throw GainError("R + D'PD singular (condition number " + std::to_string(out.condition) + ")");
    }
    out.theta = -H.fullPivLu().solve(K);
    return out;
}

namespace detail {

/// Right-hand side F with dP = -F dt + Lambda dW, and the gain at (P, Lambda).
inline std::pair<Matrix, GainResult> riccati_driver(const Matrix& P, const Matrix& Lambda,
                                                    const CoefficientBundle& c, double t,
                                                    const std::string& where) {
    GainResult g;
    try {
        g = feedback_gain(P, Lambda, c);
    } catch (const GainError&) {
        const Matrix H = symmetrized(c.R + c.D.transpose() * P * c.D);
        Eigen::SelfAdjointEigenSolver<Matrix> eig(H, Eigen::EigenvaluesOnly);
        const auto ev = eig.eigenvalues().cwiseAbs();
        const double cond = ev.minCoeff() > 0.0 ? ev.maxCoeff() / ev.minCoeff()
                                                : std::numeric_limits<double>::infinity();
        throw RiccatiBlowup(t, where, cond);
    }
    const Matrix K = c.B.transpose() * P + c.D.transpose() * P * c.C + c.D.transpose() * Lambda + c.S;
    Matrix F = P * c.A + c.A.transpose() * P + c.C.transpose() * P * c.C + Lambda * c.C +
               c.C.transpose() * Lambda + c.Q + K.transpose() * g.theta;
    return {symmetrized(F), std::move(g)};
}

}  // namespace detail

/// Sampled Riccati solution on the ODE grid (deterministic coefficients, Lambda = 0).
struct OdeRiccati {
    std::vector<double> times;        // steps + 1
    std::vector<Matrix> P;            // P(t_k)
    std::vector<Matrix> theta;        // Theta(t_k)
    std::vector<double> lambda_min;   // of R + D'P(t_k)D
    double lambda_min_overall = std::numeric_limits<double>::infinity();

    bool certified() const noexcept { return lambda_min_overall > 0.0; }
    double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
};

/// Classical RK4 integration of dP/dt = -F(P), P(T) = G, backward in time.
inline OdeRiccati solve_riccati_ode(const LQProblem& p, int steps) {
    if (!p.is_deterministic()) {
        throw DomainError("ODE Riccati route requires deterministic coefficients");
    }
    if (steps < 1) throw SizeError("ODE grid needs at least one step");
    const double h = p.horizon / steps;
    const Matrix zero = Matrix::Zero(p.dims.n, p.dims.n);
    auto rhs = [&](double t, const Matrix& P) {
        return detail::riccati_driver(P, zero, p.eval_all(t, 0.0), t, "ode").first;
    };

    OdeRiccati sol;
    const auto count = static_cast<std::size_t>(steps + 1);
    sol.times.resize(count);
    sol.P.resize(count);
    sol.theta.resize(count);
    sol.lambda_min.resize(count);
    Matrix P = p.terminal(0.0);
    for (int k = steps; k >= 0; --k) {
        const double t = k * h;
        const auto ks = static_cast<std::size_t>(k);
        sol.times[ks] = t;
        sol.P[ks] = P;
        const auto g = detail::riccati_driver(P, zero, p.eval_all(t, 0.0), t, "ode").second;
        sol.theta[ks] = g.theta;
        sol.lambda_min[ks] = g.lambda_min;
        sol.lambda_min_overall = std::min(sol.lambda_min_overall, g.lambda_min);
        if (k == 0) break;
        const Matrix k1 = rhs(t, P);
        const Matrix k2 = rhs(t - 0.5 * h, P + 0.5 * h * k1);
        const Matrix k3 = rhs(t - 0.5 * h, P + 0.5 * h * k2);
        const Matrix k4 = rhs(t - h, P + h * k3);
        P = symmetrized(P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
    }
    return sol;
}

/// ODE solution sampled at the tree times; the ODE grid must refine the tree grid.
inline TreeProcess<Matrix> sample_on_tree(const OdeRiccati& sol, const BernoulliTree& tree) {
    const int steps = static_cast<int>(sol.times.size()) - 1;
    if (steps < tree.depth() || steps % tree.depth() != 0 ||
        std::abs(sol.times.back() - tree.horizon()) > 1e-12 * tree.horizon()) {
        throw CarrierMismatch("ODE grid does not refine the tree grid");
    }
    const int stride = steps / tree.depth();
    const auto n = sol.P.front().rows();
    TreeProcess<Matrix> out(0, tree.depth(), Matrix::Zero(n, n));
    for (int k = 0; k <= tree.depth(); ++k) {
        for (auto& v : out.level(k)) v = sol.P[static_cast<std::size_t>(k * stride)];
    }
    return out;
}

/// Stochastic Riccati equation on a Bernoulli tree:
///   P_N = G,  Pbar = E[P_{k+1}|node],  Lambda_k = E[P_{k+1} dW|node]/dt,
///   P_k = Pbar + F(Pbar, Lambda_k) dt,  Theta_k = gain(Pbar, Lambda_k).
struct TreeRiccati {
    TreeProcess<Matrix> P;       // 0..N
    TreeProcess<Matrix> Lambda;  // 0..N-1
    TreeProcess<Matrix> theta;   // 0..N-1
    std::vector<double> lambda_min_by_level;
    double lambda_min = std::numeric_limits<double>::infinity();

    bool certified() const noexcept { return lambda_min > 0.0; }
};

inline TreeRiccati solve_sre_tree(const TreeModel& model) {
    const auto& tree = model.tree();
    const int N = tree.depth(), n = model.n(), m = model.m();
    TreeRiccati sol{TreeProcess<Matrix>(0, N, Matrix::Zero(n, n)),
                    TreeProcess<Matrix>(0, N - 1, Matrix::Zero(n, n)),
                    TreeProcess<Matrix>(0, N - 1, Matrix::Zero(m, n)),
                    std::vector<double>(static_cast<std::size_t>(N),
                                        std::numeric_limits<double>::infinity())};
    for (std::size_t j = 0; j < BernoulliTree::level_size(N); ++j) sol.P(N, j) = model.terminal(j);
    const double dt = tree.dt();
    for (int k = N - 1; k >= 0; --k) {
        const double t = tree.time(k);
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            const Matrix Pbar = symmetrized(cond_expect(sol.P, k, j));
            const Matrix Lambda = symmetrized(cond_expect_increment(tree, sol.P, k, j) / dt);
            auto [F, g] = detail::riccati_driver(
                Pbar, Lambda, model.at(k, j), t,
                "node (" + std::to_string(k) + "," + std::to_string(j) + ")");
            sol.P(k, j) = symmetrized(Pbar + F * dt);
            sol.Lambda(k, j) = Lambda;
            sol.theta(k, j) = std::move(g.theta);
            auto& lm = sol.lambda_min_by_level[static_cast<std::size_t>(k)];
            lm = std::min(lm, g.lambda_min);
        }
        sol.lambda_min = std::min(sol.lambda_min, sol.lambda_min_by_level[static_cast<std::size_t>(k)]);
    }
    return sol;
}

/// Riccati kernel on the tree: RK4 ODE sampled at the nodes for deterministic coefficients,
/// the tree SRE otherwise.
inline TreeProcess<Matrix> riccati_reference(const TreeModel& model, int substeps = 100) {
    if (model.problem().is_deterministic())
        return sample_on_tree(solve_riccati_ode(model.problem(), model.tree().depth() * substeps), model.tree());
    return solve_sre_tree(model).P;
}

/// Stochastic Riccati equation on a path ensemble. Pbar_k and Lambda_k are conditional
/// expectations given W(t_k); with a RegressionEngine their coefficient tables are kept so
/// the gain can be evaluated at any w.
struct LsmcRiccati {
    int n = 1, m = 1;
    double dt = 0.0;
    RegressionBasis basis;
    std::vector<Matrix> P;                 // steps + 1, paths x n^2 samples
    std::vector<Matrix> pbar_coefficients; // steps, p x n^2 (empty for exact engines)
    std::vector<Matrix> lambda_coefficients;
    std::vector<double> lambda_min_by_step;
    double lambda_min = std::numeric_limits<double>::infinity();
    Matrix P0;            // P(0) (identical on every path)
    Matrix P0_std_error;  // standard error of the pathwise estimator P_N + sum F dt, entrywise
    double max_asymmetry = 0.0;

    bool certified() const noexcept { return lambda_min > 0.0; }

    /// Theta(t_k, w) from the stored regressions.
    Matrix gain(const LQProblem& p, int k, double w) const {
        const auto ks = static_cast<std::size_t>(k);
        if (ks >= pbar_coefficients.size() || pbar_coefficients[ks].size() == 0) {
            throw Error("LSMC gain requested without regression coefficient tables");
        }
        Vector wv = Vector::Constant(1, w);
        const Matrix pb = predict(basis, pbar_coefficients[ks], wv);
        const Matrix lb = predict(basis, lambda_coefficients[ks], wv);
        const Matrix Pbar = symmetrized(detail::row_to_matrix(pb.row(0), n));
        const Matrix Lambda = symmetrized(detail::row_to_matrix(lb.row(0), n));
        return feedback_gain(Pbar, Lambda, p.eval_all(k * dt, w)).theta;
    }
};

template <ExpectationEngine Engine>
LsmcRiccati solve_sre(const LQProblem& p, const Engine& engine) {
    const auto& ens = engine.ensemble();
    const int steps = ens.steps, n = p.dims.n;
    const auto rows = static_cast<Eigen::Index>(ens.paths);
    LsmcRiccati sol;
    sol.n = n;
    sol.m = p.dims.m;
    sol.dt = ens.dt;
    if constexpr (requires { engine.basis(); }) sol.basis = engine.basis();
    sol.P.resize(static_cast<std::size_t>(steps + 1));
    sol.pbar_coefficients.resize(static_cast<std::size_t>(steps));
    sol.lambda_coefficients.resize(static_cast<std::size_t>(steps));
    sol.lambda_min_by_step.assign(static_cast<std::size_t>(steps), std::numeric_limits<double>::infinity());

    Matrix& PT = sol.P.back();
    PT.resize(rows, n * n);
    for (Eigen::Index i = 0; i < rows; ++i) {
        PT.row(i) = detail::matrix_to_row(p.terminal(p.weights.G_random ? ens.W(i, steps) : 0.0));
    }

    // pathwise P_N + sum_k F_k dt has mean P(0) and carries the Monte Carlo error
    Matrix pathwise = PT;
    const bool shared = detail::coefficients_shared(p) && detail::weights_shared(p);
    for (int k = steps - 1; k >= 0; --k) {
        const auto ks = static_cast<std::size_t>(k);
        const double t = ens.time(k);
        RegressionFit fit;
        auto [pbar, lambda] =
            detail::project_with_increment(engine, k, sol.P[ks + 1], nullptr, "SRE", &fit);
        if (fit.coefficients.size() > 0) {
            sol.pbar_coefficients[ks] = fit.coefficients.leftCols(n * n);
            sol.lambda_coefficients[ks] = fit.coefficients.rightCols(n * n) / ens.dt;
        }
        Matrix Pk(rows, n * n);
        CoefficientBundle c;
        if (shared) c = p.eval_all(t, 0.0);
        double& lm = sol.lambda_min_by_step[ks];
        for (Eigen::Index i = 0; i < rows; ++i) {
            if (!shared) c = p.eval_all(t, ens.W(i, k));
            const Matrix Pbar = symmetrized(detail::row_to_matrix(pbar.row(i), n));
            const Matrix Lambda = symmetrized(detail::row_to_matrix(lambda.row(i), n));
            auto [F, g] = detail::riccati_driver(Pbar, Lambda, c, t,
                                                 "step " + std::to_string(k) + " path " +
                                                     std::to_string(i));
            const Matrix next = Pbar + F * ens.dt;
            pathwise.row(i) += detail::matrix_to_row(F * ens.dt);
            sol.max_asymmetry = std::max(sol.max_asymmetry, (next - next.transpose()).cwiseAbs().maxCoeff());
            Pk.row(i) = detail::matrix_to_row(symmetrized(next));
            lm = std::min(lm, g.lambda_min);
        }
        sol.lambda_min = std::min(sol.lambda_min, lm);
        sol.P[ks] = std::move(Pk);
    }
    sol.P0 = detail::row_to_matrix(sol.P.front().row(0), n);
    const Eigen::RowVectorXd mean = pathwise.colwise().mean();
    const Eigen::RowVectorXd sd = ((pathwise.rowwise() - mean).array().square().colwise().sum() /
                                   std::max<double>(1.0, static_cast<double>(rows - 1)))
                                      .sqrt()
                                      .matrix();
    sol.P0_std_error = detail::row_to_matrix(sd / std::sqrt(static_cast<double>(rows)), n);
    return sol;
}

/// Regression SRE with a polynomial-in-W basis.
inline LsmcRiccati solve_sre_lsmc(const LQProblem& p, const PathEnsemble& ens, int degree = 3) {
    RegressionEngine engine(ens, RegressionBasis{BasisFamily::poly_w, degree});
    return solve_sre(p, engine);
}

/// One row of an exported Riccati/gain table.
struct GainRow {
    double t = 0.0;
    double w = 0.0;
    Matrix P;
    Matrix theta;
    double lambda_min = 0.0;
};

namespace detail {

inline void write_gain_row(std::ostream& os, const GainRow& r) {
    os << r.t << ',' << r.w;
    for (Eigen::Index i = 0; i < r.P.rows(); ++i)
        for (Eigen::Index j = 0; j < r.P.cols(); ++j) os << ',' << r.P(i, j);
    for (Eigen::Index i = 0; i < r.theta.rows(); ++i)
        for (Eigen::Index j = 0; j < r.theta.cols(); ++j) os << ',' << r.theta(i, j);
    os << ',' << r.lambda_min << '\n';
}

}  // namespace detail

/// Column layout: t,w,P00..P(n-1)(n-1),Theta00..Theta(m-1)(n-1),lambda_min (row-major).
inline void write_gain_table(std::ostream& os, int n, int m, const std::vector<GainRow>& rows) {
    const auto old = os.precision(17);
    os << "t,w";
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) os << ",P" << i << j;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) os << ",Theta" << i << j;
    os << ",lambda_min\n";
    for (const auto& r : rows) detail::write_gain_row(os, r);
    os.precision(old);
}

inline std::vector<GainRow> gain_rows(const OdeRiccati& sol) {
    std::vector<GainRow> rows;
    for (std::size_t k = 0; k < sol.times.size(); ++k) {
        rows.push_back({sol.times[k], 0.0, sol.P[k], sol.theta[k], sol.lambda_min[k]});
    }
    return rows;
}

/// One row per interior node (levels 0..N-1). P column holds Pbar-based P_k at the node.
inline std::vector<GainRow> gain_rows(const TreeModel& model, const TreeRiccati& sol) {
    std::vector<GainRow> rows;
    const auto& tree = model.tree();
    for (int k = 0; k < tree.depth(); ++k) {
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            const Matrix H = symmetrized(model.at(k, j).R + model.at(k, j).D.transpose() *
                                                                cond_expect(sol.P, k, j) *
                                                                model.at(k, j).D);
            Eigen::SelfAdjointEigenSolver<Matrix> eig(H, Eigen::EigenvaluesOnly);
            rows.push_back({tree.time(k), tree.w(k, j), sol.P(k, j), sol.theta(k, j),
                            eig.eigenvalues().minCoeff()});
        }
    }
    return rows;
}

/// Rows on a w-lattice for each step (coefficient tables required).
inline std::vector<GainRow> gain_rows(const LQProblem& p, const LsmcRiccati& sol,
                                      const std::vector<double>& w_grid) {
    std::vector<GainRow> rows;
    const int steps = static_cast<int>(sol.pbar_coefficients.size());
    for (int k = 0; k < steps; ++k) {
        for (double w : (k == 0 ? std::vector<double>{0.0} : w_grid)) {
            Vector wv = Vector::Constant(1, w);
            const auto ks = static_cast<std::size_t>(k);
            const Matrix Pbar = symmetrized(detail::row_to_matrix(
                predict(sol.basis, sol.pbar_coefficients[ks], wv).row(0), sol.n));
            const Matrix Lambda = symmetrized(detail::row_to_matrix(
                predict(sol.basis, sol.lambda_coefficients[ks], wv).row(0), sol.n));
            const auto c = p.eval_all(k * sol.dt, w);
            auto [F, g] = detail::riccati_driver(Pbar, Lambda, c, k * sol.dt, "export");
            rows.push_back({k * sol.dt, w, symmetrized(Pbar + F * sol.dt), g.theta, g.lambda_min});
        }
    }
    return rows;
}

/// Parses a table written by write_gain_table.
inline std::vector<GainRow> read_gain_table(std::istream& is, int n, int m) {
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("empty gain table");
    std::vector<GainRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::vector<double> v;
        std::string cell;
        while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
        if (v.size() != static_cast<std::size_t>(3 + n * n + m * n)) {
            throw ConfigError("gain table row has " + std::to_string(v.size()) + " columns");
        }
        GainRow r;
        r.t = v[0];
        r.w = v[1];
        r.P.resize(n, n);
        r.theta.resize(m, n);
        std::size_t at = 2;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) r.P(i, j) = v[at++];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) r.theta(i, j) = v[at++];
        r.lambda_min = v[at];
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Feedback policy from a gain table: nearest tabulated time at or below t_k, then linear
/// interpolation in w (flat extrapolation).
inline FeedbackPolicy gain_table_policy(std::vector<GainRow> rows) {
    std::map<double, std::vector<std::pair<double, Matrix>>> by_time;
    for (auto& r : rows) by_time[r.t].emplace_back(r.w, std::move(r.theta));
    bool w_dependent = false;
    for (auto& [t, v] : by_time) {
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        w_dependent = w_dependent || v.size() > 1;
    }
    FeedbackPolicy policy;
    policy.gain_depends_on_w = w_dependent;
    policy.gain = [table = std::move(by_time)](int, double t, double w) -> Matrix {
        auto it = table.upper_bound(t + 1e-12);
        if (it != table.begin()) --it;
        const auto& v = it->second;
        if (v.size() == 1 || w <= v.front().first) return v.front().second;
        if (w >= v.back().first) return v.back().second;
        auto hi = std::lower_bound(v.begin(), v.end(), w,
                                   [](const auto& a, double x) { return a.first < x; });
        auto lo = hi - 1;
        const double a = (w - lo->first) / (hi->first - lo->first);
        return (1.0 - a) * lo->second + a * hi->second;
    };
    return policy;
}

}  // namespace slq
