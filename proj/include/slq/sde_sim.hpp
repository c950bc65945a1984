#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "slq/core_model.hpp"
#include "slq/errors.hpp"
#include "slq/lattice.hpp"

namespace slq {

/// Brownian paths on a uniform grid. W is paths x (steps + 1) with W(:, 0) = 0.
struct PathEnsemble {
    int steps = 0;
    std::size_t paths = 0;
    double horizon = 1.0;
    double dt = 1.0;
    std::uint64_t seed = 0;
    int tree_depth = 0;  // > 0 when the paths enumerate the leaves of a Bernoulli tree
    Matrix W;

    double time(int k) const noexcept { return k * dt; }
    auto brownian(int k) const { return W.col(k); }
    Vector increment(int k) const { return W.col(k + 1) - W.col(k); }
    bool is_tree() const noexcept { return tree_depth > 0; }
};

/// Draws i.i.d. Normal(0, dt) increments, path by path, from a 64-bit Mersenne twister.
inline PathEnsemble generate_ensemble(int steps, std::size_t paths, double horizon,
                                      std::uint64_t seed) {
    if (steps < 1) throw SizeError("ensemble needs at least one step");
    if (paths < 1) throw SizeError("ensemble needs at least one path");
    if (!(horizon > 0.0)) throw DomainError("ensemble horizon must be positive");
    PathEnsemble ens;
    ens.steps = steps;
    ens.paths = paths;
    ens.horizon = horizon;
    ens.dt = horizon / steps;
    ens.seed = seed;
    ens.W = Matrix::Zero(static_cast<Eigen::Index>(paths), steps + 1);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, std::sqrt(ens.dt));
    for (Eigen::Index p = 0; p < ens.W.rows(); ++p) {
        for (int k = 0; k < steps; ++k) ens.W(p, k + 1) = ens.W(p, k) + normal(rng);
    }
    return ens;
}

/// The 2^N root-to-leaf paths of a Bernoulli tree as an equally weighted ensemble.
/// Leaf p passes through node (k, p >> (N - k)).
inline PathEnsemble tree_ensemble(const BernoulliTree& tree) {
    const int N = tree.depth();
    PathEnsemble ens;
    ens.steps = N;
    ens.paths = BernoulliTree::level_size(N);
    ens.horizon = tree.horizon();
    ens.dt = tree.dt();
    ens.tree_depth = N;
    ens.W = Matrix::Zero(static_cast<Eigen::Index>(ens.paths), N + 1);
    for (std::size_t p = 0; p < ens.paths; ++p) {
        for (int k = 0; k <= N; ++k) ens.W(static_cast<Eigen::Index>(p), k) = tree.w(k, p >> (N - k));
    }
    return ens;
}

struct ZeroControl {};

/// Per-step control tables (paths x m). Produced only by `adapted_table`, which sees
/// (k, t_k, W(t_k)) and nothing later.
struct OpenLoopTable {
    std::vector<Matrix> u;
};

/// u_k = Theta(k, t_k, W(t_k)) X_k + v(k, t_k, W(t_k)).
struct FeedbackPolicy {
    std::function<Matrix(int k, double t, double w)> gain;
    bool gain_depends_on_w = true;
    std::function<Vector(int k, double t, double w)> feedforward;  // optional
};

using ControlPolicy = std::variant<ZeroControl, OpenLoopTable, FeedbackPolicy>;

inline OpenLoopTable adapted_table(const PathEnsemble& ens, int m,
                                   const std::function<Vector(int k, double t, double w)>& gen) {
    OpenLoopTable table;
    table.u.reserve(static_cast<std::size_t>(ens.steps));
    for (int k = 0; k < ens.steps; ++k) {
        Matrix uk(static_cast<Eigen::Index>(ens.paths), m);
        for (Eigen::Index p = 0; p < uk.rows(); ++p) uk.row(p) = gen(k, ens.time(k), ens.W(p, k)).transpose();
        table.u.push_back(std::move(uk));
    }
    return table;
}

/// X[k] and u[k] are paths x n and paths x m.
struct StateEnsemble {
    std::vector<Matrix> X;  // steps + 1
    std::vector<Matrix> u;  // steps
};

namespace detail {

inline void require_finite(const Matrix& X, int step) {
    if (X.allFinite()) return;
    for (Eigen::Index p = 0; p < X.rows(); ++p) {
        if (!X.row(p).allFinite()) throw SimulationError(static_cast<std::size_t>(p), step);
    }
}

inline bool coefficients_shared(const LQProblem& p) { return p.coeffs.kind() != FieldKind::markov; }

inline bool weights_shared(const LQProblem& p) {
    return !p.weights.Q.depends_on_w() && !p.weights.S.depends_on_w() &&
           !p.weights.R.depends_on_w();
}

}  // namespace detail

/// Euler-Maruyama with coefficients frozen at (t_k, W(t_k)).
inline StateEnsemble simulate(const LQProblem& p, const ControlPolicy& policy, const Vector& xi,
                              const PathEnsemble& ens) {
    const int n = p.dims.n, m = p.dims.m;
    if (xi.size() != n) throw CarrierMismatch("initial state has wrong dimension");
    if (std::abs(ens.horizon - p.horizon) > 1e-12 * p.horizon) {
        throw CarrierMismatch("ensemble horizon differs from problem horizon");
    }
    const auto rows = static_cast<Eigen::Index>(ens.paths);
    if (const auto* table = std::get_if<OpenLoopTable>(&policy)) {
        if (table->u.size() != static_cast<std::size_t>(ens.steps)) {
            throw CarrierMismatch("control table has wrong number of steps");
        }
        for (const auto& uk : table->u) {
            if (uk.rows() != rows || uk.cols() != m) throw CarrierMismatch("control table shape");
        }
    }

    StateEnsemble se;
    se.X.reserve(static_cast<std::size_t>(ens.steps + 1));
    se.u.reserve(static_cast<std::size_t>(ens.steps));
    se.X.push_back(xi.transpose().replicate(rows, 1));

    const bool shared = detail::coefficients_shared(p);
    const double dt = ens.dt;
    for (int k = 0; k < ens.steps; ++k) {
        const double t = ens.time(k);
        const Matrix& X = se.X.back();
        const Vector dW = ens.increment(k);

        Matrix U = Matrix::Zero(rows, m);
        std::visit(
            [&](const auto& pol) {
                using P = std::decay_t<decltype(pol)>;
                if constexpr (std::is_same_v<P, OpenLoopTable>) {
                    U = pol.u[static_cast<std::size_t>(k)];
                } else if constexpr (std::is_same_v<P, FeedbackPolicy>) {
                    if (!pol.gain_depends_on_w) {
                        U.noalias() = X * pol.gain(k, t, 0.0).transpose();
                    } else {
                        for (Eigen::Index i = 0; i < rows; ++i) {
                            U.row(i).noalias() = X.row(i) * pol.gain(k, t, ens.W(i, k)).transpose();
                        }
                    }
                    if (pol.feedforward) {
                        for (Eigen::Index i = 0; i < rows; ++i) {
                            U.row(i) += pol.feedforward(k, t, ens.W(i, k)).transpose();
                        }
                    }
                }
            },
            policy);

        Matrix next(rows, n);
        if (shared) {
            const auto c = p.eval_all(t, 0.0);
            const Matrix drift = X * c.A.transpose() + U * c.B.transpose();
            const Matrix diffusion = X * c.C.transpose() + U * c.D.transpose();
            next = X + drift * dt + (diffusion.array().colwise() * dW.array()).matrix();
        } else {
            for (Eigen::Index i = 0; i < rows; ++i) {
                const auto c = p.eval_all(t, ens.W(i, k));
                const Vector x = X.row(i).transpose();
                const Vector v = U.row(i).transpose();
                next.row(i) = (x + (c.A * x + c.B * v) * dt + (c.C * x + c.D * v) * dW(i)).transpose();
            }
        }
        detail::require_finite(next, k + 1);
        se.u.push_back(std::move(U));
        se.X.push_back(std::move(next));
    }
    return se;
}

/// Recursive pairwise summation; the result depends only on the values and their order.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const auto half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

struct CostEstimate {
    double mean = 0.0;
    double std_error = 0.0;
};

inline CostEstimate summarize(const Vector& samples) {
    const auto M = static_cast<double>(samples.size());
    const double mean = pairwise_sum({samples.data(), static_cast<std::size_t>(samples.size())}) / M;
    if (samples.size() < 2) return {mean, 0.0};
    const Vector dev = (samples.array() - mean).square().matrix();
    const double var = pairwise_sum({dev.data(), static_cast<std::size_t>(dev.size())}) / (M - 1.0);
    return {mean, std::sqrt(var / M)};
}

/// Per-path discrete cost X_N'GX_N + sum_k (X'QX + 2u'SX + u'Ru) dt.
inline Vector path_costs(const LQProblem& p, const PathEnsemble& ens, const StateEnsemble& se) {
    const auto rows = static_cast<Eigen::Index>(ens.paths);
    Vector L = Vector::Zero(rows);
    const bool shared = detail::weights_shared(p);
    for (int k = 0; k < ens.steps; ++k) {
        const Matrix& X = se.X[static_cast<std::size_t>(k)];
        const Matrix& U = se.u[static_cast<std::size_t>(k)];
        const double t = ens.time(k);
        if (shared) {
            const auto c = p.eval_all(t, 0.0);
            const Vector running = ((X * c.Q).cwiseProduct(X)).rowwise().sum() +
                                   2.0 * ((U * c.S).cwiseProduct(X)).rowwise().sum() +
                                   ((U * c.R).cwiseProduct(U)).rowwise().sum();
            L += running * ens.dt;
        } else {
            for (Eigen::Index i = 0; i < rows; ++i) {
                const auto c = p.eval_all(t, ens.W(i, k));
                const Vector x = X.row(i).transpose();
                const Vector v = U.row(i).transpose();
                L(i) += (x.dot(c.Q * x) + 2.0 * v.dot(c.S * x) + v.dot(c.R * v)) * ens.dt;
            }
        }
    }
    const Matrix& XN = se.X.back();
    if (!p.weights.G_random) {
        const Matrix G = p.terminal(0.0);
        L += ((XN * G).cwiseProduct(XN)).rowwise().sum();
    } else {
        for (Eigen::Index i = 0; i < rows; ++i) {
            const Vector x = XN.row(i).transpose();
            L(i) += x.dot(p.terminal(ens.W(i, ens.steps)) * x);
        }
    }
    return L;
}

/// Sample mean of the per-path cost and its standard error.
inline CostEstimate evaluate_cost(const LQProblem& p, const PathEnsemble& ens,
                                  const StateEnsemble& se) {
    return summarize(path_costs(p, ens, se));
}

/// Rows: path,step,t,W.
inline void write_ensemble_csv(std::ostream& os, const PathEnsemble& ens) {
    const auto old = os.precision(17);
    os << "path,step,t,W\n";
    for (Eigen::Index p = 0; p < ens.W.rows(); ++p)
        for (int k = 0; k <= ens.steps; ++k)
            os << p << ',' << k << ',' << ens.time(k) << ',' << ens.W(p, k) << '\n';
    os.precision(old);
}

/// Rows: path,step,t,x0..x{n-1},u0..u{m-1} (controls empty at the final step).
inline void write_states_csv(std::ostream& os, const PathEnsemble& ens, const StateEnsemble& se) {
    const auto old = os.precision(17);
    const auto n = se.X.front().cols();
    const auto m = se.u.empty() ? 0 : se.u.front().cols();
    os << "path,step,t";
    for (Eigen::Index i = 0; i < n; ++i) os << ",x" << i;
    for (Eigen::Index i = 0; i < m; ++i) os << ",u" << i;
    os << '\n';
    for (Eigen::Index p = 0; p < ens.W.rows(); ++p) {
        for (int k = 0; k <= ens.steps; ++k) {
            os << p << ',' << k << ',' << ens.time(k);
            for (Eigen::Index i = 0; i < n; ++i) os << ',' << se.X[static_cast<std::size_t>(k)](p, i);
            for (Eigen::Index i = 0; i < m; ++i) {
                os << ',';
                if (k < ens.steps) os << se.u[static_cast<std::size_t>(k)](p, i);
            }
            os << '\n';
        }
    }
    os.precision(old);
}

}  // namespace slq
