#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "slq/errors.hpp"

namespace slq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// How a coefficient depends on (t, W(t)). Ordered from least to most random.
enum class FieldKind { constant = 0, time_varying = 1, markov = 2 };

inline const char* to_string(FieldKind kind) {
    switch (kind) {
        case FieldKind::constant: return "constant";
        case FieldKind::time_varying: return "deterministic-time-varying";
        case FieldKind::markov: return "markov-in-brownian";
    }
    return "unknown";
}

struct Dimensions {
    int n = 1;  // state
    int m = 1;  // control
};

/// A matrix-valued function of (t, w) where w is the current Brownian value.
/// Evaluators must be pure.
class MatrixField {
public:
    using Evaluator = std::function<Matrix(double t, double w)>;

    MatrixField() = default;
    MatrixField(Evaluator eval, FieldKind kind) : eval_(std::move(eval)), kind_(kind) {}

    static MatrixField constant(Matrix value) {
        return MatrixField([v = std::move(value)](double, double) { return v; },
                           FieldKind::constant);
    }
    static MatrixField time_varying(std::function<Matrix(double)> f) {
        return MatrixField([f = std::move(f)](double t, double) { return f(t); },
                           FieldKind::time_varying);
    }
    static MatrixField markov(Evaluator f) { return MatrixField(std::move(f), FieldKind::markov); }

    Matrix operator()(double t, double w) const { return eval_(t, w); }
    FieldKind kind() const noexcept { return kind_; }
    bool depends_on_w() const noexcept { return kind_ == FieldKind::markov; }
    explicit operator bool() const noexcept { return static_cast<bool>(eval_); }

private:
    Evaluator eval_;
    FieldKind kind_ = FieldKind::constant;
};

/// Drift and diffusion coefficients of dX = (AX+Bu)dt + (CX+Du)dW.
struct CoefficientField {
    MatrixField A, B, C, D;
    double bound = 1.0;

    FieldKind kind() const {
        return std::max({A.kind(), B.kind(), C.kind(), D.kind()});
    }
};

/// Running weights Q, S, R and terminal weight G. G depends on W(T) only.
struct WeightField {
    MatrixField Q, S, R;
    std::function<Matrix(double w)> G;
    bool G_random = false;
    double bound = 1.0;

    FieldKind kind() const {
        auto k = std::max({Q.kind(), S.kind(), R.kind()});
        return G_random ? FieldKind::markov : k;
    }
};

/// All coefficients evaluated at one (t, w); Q and R symmetrized.
struct CoefficientBundle {
    Matrix A, B, C, D, Q, S, R;
};

inline Matrix symmetrized(const Matrix& x) { return 0.5 * (x + x.transpose()); }

struct LQProblem {
    std::string name;
    Dimensions dims;
    double horizon = 1.0;
    CoefficientField coeffs;
    WeightField weights;

    FieldKind kind() const { return std::max(coeffs.kind(), weights.kind()); }
    bool is_deterministic() const { return kind() != FieldKind::markov; }

    CoefficientBundle eval_all(double t, double w) const {
        check_time(t);
        return CoefficientBundle{coeffs.A(t, w), coeffs.B(t, w), coeffs.C(t, w), coeffs.D(t, w),
                                 symmetrized(weights.Q(t, w)), weights.S(t, w),
                                 symmetrized(weights.R(t, w))};
    }

    Matrix terminal(double w) const { return symmetrized(weights.G(w)); }

    void check_time(double t) const {
        const double slack = 1e-12 * std::max(1.0, horizon);
        if (!(t >= -slack && t <= horizon + slack)) {
            throw DomainError("time " + std::to_string(t) + " outside [0, " +
                              std::to_string(horizon) + "]");
        }
    }
};

struct ValidationReport {
    std::vector<std::string> violations;
    bool accepted() const noexcept { return violations.empty(); }
};

namespace detail {

inline double max_asymmetry(const Matrix& x) {
    if (x.rows() != x.cols()) return 0.0;
    return (x - x.transpose()).cwiseAbs().maxCoeff();
}

}  // namespace detail

/// Probes every evaluator on a 101 x 101 lattice of (t, w), w in [-3 sqrt(T), 3 sqrt(T)].
/// Evaluator failures are reported, not rethrown.
inline ValidationReport validate_problem(const LQProblem& p) {
    ValidationReport report;
    auto& out = report.violations;
    const int n = p.dims.n, m = p.dims.m;
    if (n < 1 || m < 1) {
        out.push_back("dimensions must be positive");
        return report;
    }
    if (!(p.horizon > 0.0) || !std::isfinite(p.horizon)) {
        out.push_back("horizon must be positive");
        return report;
    }

    struct Probe {
        const char* name;
        const MatrixField* field;
        int rows, cols;
        bool symmetric;
        double bound;
    };
    const Probe probes[] = {
        {"A", &p.coeffs.A, n, n, false, p.coeffs.bound},
        {"B", &p.coeffs.B, n, m, false, p.coeffs.bound},
        {"C", &p.coeffs.C, n, n, false, p.coeffs.bound},
        {"D", &p.coeffs.D, n, m, false, p.coeffs.bound},
        {"Q", &p.weights.Q, n, n, true, p.weights.bound},
        {"S", &p.weights.S, m, n, false, p.weights.bound},
        {"R", &p.weights.R, m, m, true, p.weights.bound},
    };

    constexpr int lattice = 101;
    constexpr double sym_tol = 1e-12;
    const double wmax = 3.0 * std::sqrt(p.horizon);
    auto w_at = [&](int i) { return -wmax + 2.0 * wmax * i / (lattice - 1); };

    auto inspect = [&](const std::string& name, const Matrix& v, int rows, int cols,
                       bool symmetric, double bound, bool& shape_bad, bool& sym_bad,
                       bool& bound_bad) {
        if (v.rows() != rows || v.cols() != cols) {
            if (!shape_bad) {
                out.push_back(name + ": shape " + std::to_string(v.rows()) + "x" +
                              std::to_string(v.cols()) + ", expected " + std::to_string(rows) +
                              "x" + std::to_string(cols));
            }
            shape_bad = true;
            return;
        }
        if (!v.allFinite()) {
            if (!bound_bad) out.push_back(name + ": non-finite entry");
            bound_bad = true;
            return;
        }
        if (symmetric && !sym_bad && detail::max_asymmetry(v) > sym_tol) {
            out.push_back(name + ": asymmetric (max |X - X'| = " +
                          std::to_string(detail::max_asymmetry(v)) + ")");
            sym_bad = true;
        }
        if (!bound_bad && v.size() > 0 && v.cwiseAbs().maxCoeff() > bound) {
            out.push_back(name + ": entry " + std::to_string(v.cwiseAbs().maxCoeff()) +
                          " exceeds declared bound " + std::to_string(bound));
            bound_bad = true;
        }
    };

    for (const auto& probe : probes) {
        if (!*probe.field) {
            out.push_back(std::string(probe.name) + ": missing evaluator");
            continue;
        }
        bool shape_bad = false, sym_bad = false, bound_bad = false, threw = false;
        const bool w_dep = probe.field->depends_on_w();
        for (int i = 0; i < lattice && !shape_bad && !threw; ++i) {
            const double t = p.horizon * i / (lattice - 1);
            for (int l = 0; l < (w_dep ? lattice : 1) && !shape_bad; ++l) {
                try {
                    inspect(probe.name, (*probe.field)(t, w_at(w_dep ? l : lattice / 2)),
                            probe.rows, probe.cols, probe.symmetric, probe.bound, shape_bad,
                            sym_bad, bound_bad);
                } catch (const std::exception& e) {
                    out.push_back(std::string(probe.name) + ": evaluator failed at t=" +
                                  std::to_string(t) + ": " + e.what());
                    threw = true;
                    break;
                }
            }
        }
    }

    if (!p.weights.G) {
        out.push_back("G: missing evaluator");
    } else {
        bool shape_bad = false, sym_bad = false, bound_bad = false;
        for (int l = 0; l < lattice && !shape_bad; ++l) {
            try {
                inspect("G", p.weights.G(w_at(l)), n, n, true, p.weights.bound, shape_bad,
                        sym_bad, bound_bad);
            } catch (const std::exception& e) {
                out.push_back(std::string("G: evaluator failed: ") + e.what());
                break;
            }
        }
    }
    return report;
}

}  // namespace slq
