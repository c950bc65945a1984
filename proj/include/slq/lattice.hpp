#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "slq/core_model.hpp"
#include "slq/errors.hpp"

// Non-recombining Bernoulli tree: the exact discrete-time world. Node (k, j) has
// children (k+1, 2j) reached by dW = +sqrt(dt) and (k+1, 2j+1) reached by dW = -sqrt(dt),
// each with probability 1/2.

namespace slq {

class BernoulliTree {
public:
    static constexpr int max_depth = 24;

    BernoulliTree(int depth, double horizon)
        : depth_(depth), horizon_(horizon), dt_(horizon / depth), sqrt_dt_(std::sqrt(dt_)) {}

    int depth() const noexcept { return depth_; }
    double horizon() const noexcept { return horizon_; }
    double dt() const noexcept { return dt_; }
    double sqrt_dt() const noexcept { return sqrt_dt_; }
    double time(int k) const noexcept { return k * dt_; }

    static std::size_t level_size(int k) noexcept { return std::size_t{1} << k; }
    std::size_t node_count() const noexcept { return (std::size_t{1} << (depth_ + 1)) - 1; }

    /// Brownian value at node (k, j): sqrt(dt) * (#up - #down) along the path.
    double w(int k, std::size_t j) const noexcept {
        return sqrt_dt_ * (k - 2 * std::popcount(j));
    }

    static std::size_t up(std::size_t j) noexcept { return 2 * j; }
    static std::size_t down(std::size_t j) noexcept { return 2 * j + 1; }

    /// Increment that leads into a child with the given index.
    double increment_into(std::size_t child) const noexcept {
        return (child % 2 == 0) ? sqrt_dt_ : -sqrt_dt_;
    }

private:
    int depth_;
    double horizon_;
    double dt_;
    double sqrt_dt_;
};

inline BernoulliTree build_tree(int depth, double horizon) {
    if (depth < 1 || depth > BernoulliTree::max_depth) {
        throw SizeError("tree depth " + std::to_string(depth) + " outside [1, " +
                        std::to_string(BernoulliTree::max_depth) + "]");
    }
    if (!(horizon > 0.0)) throw DomainError("tree horizon must be positive");
    return BernoulliTree(depth, horizon);
}

/// Values of one uniform shape attached to every node of levels [first, last].
template <class T>
class TreeProcess {
public:
    TreeProcess() = default;
    TreeProcess(int first_level, int last_level, const T& init = T{})
        : first_(first_level), last_(last_level) {
        levels_.reserve(static_cast<std::size_t>(last_ - first_ + 1));
        for (int k = first_; k <= last_; ++k) {
            levels_.emplace_back(BernoulliTree::level_size(k), init);
        }
    }

    int first_level() const noexcept { return first_; }
    int last_level() const noexcept { return last_; }
    bool defined_at(int k) const noexcept { return k >= first_ && k <= last_; }

    T& operator()(int k, std::size_t j) { return levels_[k - first_][j]; }
    const T& operator()(int k, std::size_t j) const { return levels_[k - first_][j]; }

    std::vector<T>& level(int k) { return levels_[k - first_]; }
    const std::vector<T>& level(int k) const { return levels_[k - first_]; }

private:
    int first_ = 0;
    int last_ = -1;
    std::vector<std::vector<T>> levels_;
};

/// E[V_{k+1} | node (k, j)].
template <class T>
T cond_expect(const TreeProcess<T>& proc, int k, std::size_t j) {
    const auto& next = proc.level(k + 1);
    return T(0.5 * (next[BernoulliTree::up(j)] + next[BernoulliTree::down(j)]));
}

/// E[V_{k+1} dW_k | node (k, j)].
template <class T>
T cond_expect_increment(const BernoulliTree& tree, const TreeProcess<T>& proc, int k,
                        std::size_t j) {
    const auto& next = proc.level(k + 1);
    return T((0.5 * tree.sqrt_dt()) * (next[BernoulliTree::up(j)] - next[BernoulliTree::down(j)]));
}

/// Problem coefficients cached at every interior node and the terminal weight at every leaf.
/// Deterministic fields are stored once per level.
class TreeModel {
public:
    TreeModel(BernoulliTree tree, LQProblem problem)
        : tree_(std::move(tree)), problem_(std::move(problem)) {
        const int N = tree_.depth();
        const bool random_coeffs = problem_.coeffs.kind() == FieldKind::markov ||
                                   problem_.weights.Q.depends_on_w() ||
                                   problem_.weights.S.depends_on_w() ||
                                   problem_.weights.R.depends_on_w();
        bundles_.resize(static_cast<std::size_t>(N));
        for (int k = 0; k < N; ++k) {
            const double t = tree_.time(k);
            if (random_coeffs) {
                auto& lvl = bundles_[k];
                lvl.reserve(BernoulliTree::level_size(k));
                for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
                    lvl.push_back(problem_.eval_all(t, tree_.w(k, j)));
                }
            } else {
                bundles_[k].push_back(problem_.eval_all(t, 0.0));
            }
        }
        if (problem_.weights.G_random) {
            terminal_.reserve(BernoulliTree::level_size(N));
            for (std::size_t j = 0; j < BernoulliTree::level_size(N); ++j) {
                terminal_.push_back(problem_.terminal(tree_.w(N, j)));
            }
        } else {
            terminal_.push_back(problem_.terminal(0.0));
        }
    }

    const BernoulliTree& tree() const noexcept { return tree_; }
    const LQProblem& problem() const noexcept { return problem_; }
    int depth() const noexcept { return tree_.depth(); }
    int n() const noexcept { return problem_.dims.n; }
    int m() const noexcept { return problem_.dims.m; }

    const CoefficientBundle& at(int k, std::size_t j) const {
        const auto& lvl = bundles_[k];
        return lvl.size() == 1 ? lvl.front() : lvl[j];
    }
    const Matrix& terminal(std::size_t j) const {
        return terminal_.size() == 1 ? terminal_.front() : terminal_[j];
    }

private:
    BernoulliTree tree_;
    LQProblem problem_;
    std::vector<std::vector<CoefficientBundle>> bundles_;
    std::vector<Matrix> terminal_;
};

/// X_{k+1} = X_k + (A X_k + B u_k) dt + (C X_k + D u_k) dW_k, X = xi at every node of `first_level`.
inline TreeProcess<Vector> forward_dynamics(const TreeModel& model, const TreeProcess<Vector>& u,
                                            const Vector& xi, int first_level = 0) {
    const auto& tree = model.tree();
    const int N = tree.depth();
    if (!u.defined_at(first_level) || (N - 1 > first_level && !u.defined_at(N - 1))) {
        throw CarrierMismatch("control not defined on levels [" + std::to_string(first_level) +
                              ", " + std::to_string(N - 1) + "]");
    }
    TreeProcess<Vector> X(first_level, N, Vector::Zero(model.n()));
    for (auto& x : X.level(first_level)) x = xi;
    const double dt = tree.dt(), s = tree.sqrt_dt();
    for (int k = first_level; k < N; ++k) {
        const auto& xs = X.level(k);
        auto& next = X.level(k + 1);
        for (std::size_t j = 0; j < xs.size(); ++j) {
            const auto& c = model.at(k, j);
            const Vector& x = xs[j];
            const Vector& uk = u(k, j);
            const Vector drift = x + (c.A * x + c.B * uk) * dt;
            const Vector diffusion = (c.C * x + c.D * uk) * s;
            next[BernoulliTree::up(j)] = drift + diffusion;
            next[BernoulliTree::down(j)] = drift - diffusion;
        }
    }
    return X;
}

struct TreeClosedLoop {
    TreeProcess<Vector> X;
    TreeProcess<Vector> u;
};

/// Forward dynamics under the feedback u_k = Theta_k X_k.
inline TreeClosedLoop simulate_feedback(const TreeModel& model, const TreeProcess<Matrix>& theta,
                                        const Vector& xi, int first_level = 0) {
    const auto& tree = model.tree();
    const int N = tree.depth();
    TreeClosedLoop out{TreeProcess<Vector>(first_level, N, Vector::Zero(model.n())),
                       TreeProcess<Vector>(first_level, N - 1, Vector::Zero(model.m()))};
    for (auto& x : out.X.level(first_level)) x = xi;
    const double dt = tree.dt(), s = tree.sqrt_dt();
    for (int k = first_level; k < N; ++k) {
        const auto& xs = out.X.level(k);
        auto& us = out.u.level(k);
        auto& next = out.X.level(k + 1);
        for (std::size_t j = 0; j < xs.size(); ++j) {
            const auto& c = model.at(k, j);
            const Vector& x = xs[j];
            us[j] = theta(k, j) * x;
            const Vector drift = x + (c.A * x + c.B * us[j]) * dt;
            const Vector diffusion = (c.C * x + c.D * us[j]) * s;
            next[BernoulliTree::up(j)] = drift + diffusion;
            next[BernoulliTree::down(j)] = drift - diffusion;
        }
    }
    return out;
}

template <class T>
struct TreeBsdeSolution {
    TreeProcess<T> Y;     // levels first..N
    TreeProcess<T> Z;     // levels first..N-1
    TreeProcess<T> Ybar;  // E[Y_{k+1} | F_k], levels first..N-1
};

/// Explicit backward scheme on the tree:
///   Z_k = E[Y_{k+1} dW | node] / dt,  Ybar_k = E[Y_{k+1} | node],
///   Y_k = Ybar_k + f(k, j, Ybar_k, Z_k) dt.
/// `terminal` must be defined at level N; the driver returns a value of the same shape as Y.
template <class T, class Driver>
TreeBsdeSolution<T> backward_bsde_tree(const BernoulliTree& tree, const TreeProcess<T>& terminal,
                                       Driver&& driver, int first_level = 0) {
    const int N = tree.depth();
    if (!terminal.defined_at(N)) throw CarrierMismatch("terminal condition not defined at level N");
    const T& sample = terminal(N, 0);
    TreeBsdeSolution<T> sol{TreeProcess<T>(first_level, N, sample),
                            TreeProcess<T>(first_level, N - 1, sample),
                            TreeProcess<T>(first_level, N - 1, sample)};
    sol.Y.level(N) = terminal.level(N);
    const double dt = tree.dt();
    for (int k = N - 1; k >= first_level; --k) {
        auto& ys = sol.Y.level(k);
        for (std::size_t j = 0; j < ys.size(); ++j) {
            T ybar = cond_expect(sol.Y, k, j);
            T z = T(cond_expect_increment(tree, sol.Y, k, j) / dt);
            ys[j] = T(ybar + driver(k, j, static_cast<const T&>(ybar), static_cast<const T&>(z)) * dt);
            sol.Ybar(k, j) = std::move(ybar);
            sol.Z(k, j) = std::move(z);
        }
    }
    return sol;
}

struct DpSolution {
    TreeProcess<Matrix> P;      // levels 0..N, symmetric
    TreeProcess<Matrix> theta;  // levels 0..N-1
    double min_hessian_eigenvalue = 0.0;  // of H_k / dt over all nodes

    double value(const Vector& xi) const { return xi.dot(P(0, 0) * xi); }
};

struct DpNodeStep {
    Matrix P;
    Matrix theta;
    double min_hessian_eigenvalue;
};

/// One exact DP step at node (k, j) given the value kernels of its two children. With
/// F = I + A dt +/- C sqrt(dt) and H = B dt +/- D sqrt(dt) along the two branches,
///   Huu = R dt + E[H' P H],  Hux = S dt + E[H' P F],  Hxx = Q dt + E[F' P F],
///   Theta_k = -Huu^{-1} Hux,  P_k = Hxx - Hux' Huu^{-1} Hux.
/// Huu = 0 together with Hux = 0 gives Theta_k = 0.
inline DpNodeStep dp_node_step(const TreeModel& model, int k, std::size_t j, const Matrix& P_up,
                               const Matrix& P_down) {
    const auto& tree = model.tree();
    const double dt = tree.dt(), s = tree.sqrt_dt();
    const auto& c = model.at(k, j);
    const Matrix I = Matrix::Identity(model.n(), model.n());
    Matrix Huu = c.R * dt, Hux = c.S * dt, Hxx = c.Q * dt;
    for (int branch = 0; branch < 2; ++branch) {
        const double dw = branch == 0 ? s : -s;
        const Matrix& Pn = branch == 0 ? P_up : P_down;
        const Matrix F = I + c.A * dt + c.C * dw;
        const Matrix H = c.B * dt + c.D * dw;
        const Matrix PF = Pn * F;
        Huu.noalias() += 0.5 * H.transpose() * Pn * H;
        Hux.noalias() += 0.5 * H.transpose() * PF;
        Hxx.noalias() += 0.5 * F.transpose() * PF;
    }
    Huu = symmetrized(Huu);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(Huu / dt, Eigen::EigenvaluesOnly);
    const double lmin = eig.eigenvalues().minCoeff();
    Matrix theta;
    if (lmin > 0.0) {
        theta = -Eigen::LLT<Matrix>(Huu).solve(Hux);
    } else if (lmin == 0.0 && Huu.isZero(0.0) && Hux.isZero(0.0)) {
        theta = Matrix::Zero(model.m(), model.n());  // the control does not enter the cost
    } else {
        throw IndefiniteHessian(k, j, lmin);
    }
    Matrix P = symmetrized(Hxx + Hux.transpose() * theta);
    return {std::move(P), std::move(theta), lmin};
}

/// Exact backward dynamic programming for the discrete problem on the whole tree.
inline DpSolution dp_solve(const TreeModel& model) {
    const int N = model.depth(), n = model.n(), m = model.m();
    DpSolution sol{TreeProcess<Matrix>(0, N, Matrix::Zero(n, n)),
                   TreeProcess<Matrix>(0, N - 1, Matrix::Zero(m, n)),
                   std::numeric_limits<double>::infinity()};
    for (std::size_t j = 0; j < BernoulliTree::level_size(N); ++j) sol.P(N, j) = model.terminal(j);
    for (int k = N - 1; k >= 0; --k) {
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            auto step = dp_node_step(model, k, j, sol.P(k + 1, BernoulliTree::up(j)),
                                     sol.P(k + 1, BernoulliTree::down(j)));
            sol.min_hessian_eigenvalue = std::min(sol.min_hessian_eigenvalue, step.min_hessian_eigenvalue);
            sol.P(k, j) = std::move(step.P);
            sol.theta(k, j) = std::move(step.theta);
        }
    }
    return sol;
}

/// Value kernel of the problem restricted to the subtree rooted at (level, index), solved
/// by DP over that subtree only.
inline Matrix dp_subtree_value(const TreeModel& model, int level, std::size_t index) {
    const int N = model.depth();
    // kernels of the current frontier, left to right
    std::vector<Matrix> frontier;
    const std::size_t width = std::size_t{1} << (N - level);
    frontier.reserve(width);
    for (std::size_t j = index * width; j < (index + 1) * width; ++j) frontier.push_back(model.terminal(j));
    for (int k = N - 1; k >= level; --k) {
        const std::size_t first = index << (k - level);
        std::vector<Matrix> parents;
        parents.reserve(frontier.size() / 2);
        for (std::size_t i = 0; i < frontier.size() / 2; ++i) {
            parents.push_back(dp_node_step(model, k, first + i, frontier[2 * i], frontier[2 * i + 1]).P);
        }
        frontier = std::move(parents);
    }
    return frontier.front();
}

/// Conditional cost from each node onward along (X, u):
/// C_N = X'GX, C_k = (X'QX + 2u'SX + u'Ru) dt + E[C_{k+1} | node].
inline TreeProcess<double> cost_to_go(const TreeModel& model, const TreeProcess<Vector>& X,
                                      const TreeProcess<Vector>& u, int first_level = 0) {
    const int N = model.depth();
    const double dt = model.tree().dt();
    TreeProcess<double> C(first_level, N, 0.0);
    for (std::size_t j = 0; j < BernoulliTree::level_size(N); ++j) {
        const Vector& x = X(N, j);
        C(N, j) = x.dot(model.terminal(j) * x);
    }
    for (int k = N - 1; k >= first_level; --k) {
        for (std::size_t j = 0; j < BernoulliTree::level_size(k); ++j) {
            const auto& c = model.at(k, j);
            const Vector& x = X(k, j);
            const Vector& v = u(k, j);
            const double running = x.dot(c.Q * x) + 2.0 * v.dot(c.S * x) + v.dot(c.R * v);
            C(k, j) = running * dt + cond_expect(C, k, j);
        }
    }
    return C;
}

/// Plain average over the nodes of one level (each node has probability 2^-k).
template <class T>
T level_mean(const TreeProcess<T>& proc, int k) {
    const auto& lvl = proc.level(k);
    std::vector<T> work(lvl.begin(), lvl.end());
    // pairwise reduction keeps the result independent of level layout
    while (work.size() > 1) {
        for (std::size_t i = 0; i < work.size() / 2; ++i) {
            work[i] = T(0.5 * (work[2 * i] + work[2 * i + 1]));
        }
        work.resize(work.size() / 2);
    }
    return work.front();
}

namespace detail {

inline void append_flat(std::ostream& os, double v) { os << ',' << v; }

template <class Derived>
void append_flat(std::ostream& os, const Eigen::MatrixBase<Derived>& v) {
    for (Eigen::Index r = 0; r < v.rows(); ++r)
        for (Eigen::Index c = 0; c < v.cols(); ++c) os << ',' << v(r, c);
}

inline int flat_size(double) { return 1; }
template <class Derived>
int flat_size(const Eigen::MatrixBase<Derived>& v) {
    return static_cast<int>(v.size());
}

}  // namespace detail

/// CSV rows: level,index,w,v0,v1,... with matrices flattened row-major.
template <class T>
void write_tree_csv(std::ostream& os, const BernoulliTree& tree, const TreeProcess<T>& proc) {
    const auto old_precision = os.precision(17);
    os << "level,index,w";
    const int cols = detail::flat_size(proc(proc.first_level(), 0));
    for (int c = 0; c < cols; ++c) os << ",v" << c;
    os << '\n';
    for (int k = proc.first_level(); k <= proc.last_level(); ++k) {
        const auto& lvl = proc.level(k);
        for (std::size_t j = 0; j < lvl.size(); ++j) {
            os << k << ',' << j << ',' << tree.w(k, j);
            detail::append_flat(os, lvl[j]);
            os << '\n';
        }
    }
    os.precision(old_precision);
}

}  // namespace slq
