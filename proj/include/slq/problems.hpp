#pragma once

#include <cmath>
#include <string>

#include "slq/core_model.hpp"

// Built-in problem instances used by tests, the acceptance suite and the CLI.

namespace slq::problems {

inline LQProblem zero(int n = 1, int m = 1, double horizon = 1.0) {
    LQProblem p;
    p.name = "zero";
    p.dims = {n, m};
    p.horizon = horizon;
    p.coeffs.A = MatrixField::constant(Matrix::Zero(n, n));
    p.coeffs.B = MatrixField::constant(Matrix::Zero(n, m));
    p.coeffs.C = MatrixField::constant(Matrix::Zero(n, n));
    p.coeffs.D = MatrixField::constant(Matrix::Zero(n, m));
    p.weights.Q = MatrixField::constant(Matrix::Zero(n, n));
    p.weights.S = MatrixField::constant(Matrix::Zero(m, n));
    p.weights.R = MatrixField::constant(Matrix::Zero(m, m));
    p.weights.G = [n](double) { return Matrix::Zero(n, n).eval(); };
    p.coeffs.bound = 1.0;
    p.weights.bound = 1.0;
    return p;
}

/// dX = u1 ds + u2 dW on [0,1], cost E{4|X(1)|^2 + int 5|u1|^2 - |u2|^2}.
/// R is indefinite yet J(t,0;u) >= E int |u|^2; the value kernel is P(t) = 20/(9-4t).
inline LQProblem example_3_7() {
    LQProblem p = zero(1, 2, 1.0);
    p.name = "example-3-7";
    p.coeffs.B = MatrixField::constant((Matrix(1, 2) << 1.0, 0.0).finished());
    p.coeffs.D = MatrixField::constant((Matrix(1, 2) << 0.0, 1.0).finished());
    p.weights.R = MatrixField::constant((Matrix(2, 2) << 5.0, 0.0, 0.0, -1.0).finished());
    p.weights.G = [](double) { return Matrix::Constant(1, 1, 4.0); };
    p.coeffs.bound = 1.0;
    p.weights.bound = 5.0;
    return p;
}

inline double example_3_7_riccati(double t) { return 20.0 / (9.0 - 4.0 * t); }

/// Scalar problem satisfying R >= I, Q, G >= 0, S = 0 with A = B = C = D = 1.
inline LQProblem standard_condition() {
    LQProblem p = zero(1, 1, 1.0);
    p.name = "standard-condition";
    const Matrix one = Matrix::Constant(1, 1, 1.0);
    p.coeffs.A = p.coeffs.B = p.coeffs.C = p.coeffs.D = MatrixField::constant(one);
    p.weights.Q = MatrixField::constant(one);
    p.weights.R = MatrixField::constant(one);
    p.weights.G = [one](double) { return one; };
    p.coeffs.bound = 1.0;
    p.weights.bound = 1.0;
    return p;
}

/// Uncontrolled dynamics with random terminal weight G = 2 + tanh(W(T)); P(t) = E[G | F_t].
inline LQProblem tanh_terminal() {
    LQProblem p = zero(1, 1, 1.0);
    p.name = "tanh-terminal";
    p.weights.R = MatrixField::constant(Matrix::Constant(1, 1, 1.0));
    p.weights.G = [](double w) { return Matrix::Constant(1, 1, 2.0 + std::tanh(w)); };
    p.weights.G_random = true;
    p.weights.bound = 3.0;
    return p;
}

/// Controlled scalar problem whose drift, running and terminal weights all depend on W(t).
inline LQProblem markov_benchmark() {
    LQProblem p = zero(1, 1, 1.0);
    p.name = "markov-benchmark";
    p.coeffs.A = MatrixField::markov(
        [](double, double w) { return Matrix::Constant(1, 1, 0.2 * std::sin(w)); });
    p.coeffs.B = MatrixField::constant(Matrix::Constant(1, 1, 1.0));
    p.coeffs.C = MatrixField::constant(Matrix::Constant(1, 1, 0.3));
    p.coeffs.D = MatrixField::constant(Matrix::Constant(1, 1, 0.5));
    p.weights.Q = MatrixField::markov(
        [](double, double w) { return Matrix::Constant(1, 1, 1.0 + 0.5 * std::cos(w)); });
    p.weights.R = MatrixField::constant(Matrix::Constant(1, 1, 1.0));
    p.weights.G = [](double w) { return Matrix::Constant(1, 1, 1.0 + 0.5 * std::tanh(w)); };
    p.weights.G_random = true;
    p.coeffs.bound = 1.0;
    p.weights.bound = 1.5;
    return p;
}

/// Same dynamics, every weight multiplied by -1 (a concave cost when the original is convex).
inline LQProblem negated(LQProblem p) {
    p.name = "negated-" + p.name;
    auto neg = [](const MatrixField& f) {
        return MatrixField([f](double t, double w) { return Matrix(-f(t, w)); }, f.kind());
    };
    p.weights.Q = neg(p.weights.Q);
    p.weights.S = neg(p.weights.S);
    p.weights.R = neg(p.weights.R);
    p.weights.G = [g = p.weights.G](double w) { return Matrix(-g(w)); };
    return p;
}

/// Replaces R by R - eps I.
inline LQProblem shifted_control_weight(LQProblem p, double eps) {
    const int m = p.dims.m;
    p.weights.R = MatrixField(
        [r = p.weights.R, eps, m](double t, double w) {
            return Matrix(r(t, w) - eps * Matrix::Identity(m, m));
        },
        p.weights.R.kind());
    p.weights.bound += std::abs(eps);
    return p;
}

}  // namespace slq::problems
