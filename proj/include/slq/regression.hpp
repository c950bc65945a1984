#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "slq/core_model.hpp"
#include "slq/errors.hpp"

namespace slq {

enum class BasisFamily { poly_w, poly_wx };

/// Total-degree polynomial features in W(t_k) (and, for poly_wx, the state components).
/// Column 0 is always the constant function.
struct RegressionBasis {
    BasisFamily family = BasisFamily::poly_wx;
    int degree = 3;

    /// Exponent tuples over (w, x_0, ..., x_{n-1}) ordered by total degree.
    std::vector<std::vector<int>> exponents(int n_state) const {
        const int vars = 1 + n_state;
        std::vector<std::vector<int>> out;
        for (int total = 0; total <= degree; ++total) {
            // enumerate compositions of `total` into `vars` parts
            std::vector<int> cur(static_cast<std::size_t>(vars), 0);
            auto rec = [&](auto&& self, int pos, int left) -> void {
                if (pos == vars - 1) {
                    cur[static_cast<std::size_t>(pos)] = left;
                    out.push_back(cur);
                    return;
                }
                for (int a = left; a >= 0; --a) {
                    cur[static_cast<std::size_t>(pos)] = a;
                    self(self, pos + 1, left - a);
                }
            };
            rec(rec, 0, total);
        }
        return out;
    }

    int feature_count(int n_state) const {
        return static_cast<int>(exponents(n_state).size());
    }

    /// Feature matrix (paths x p). State columns are used only when the family is poly_wx
    /// and `state` is supplied.
    Matrix features(const Vector& w, const Matrix* state = nullptr) const {
        if (degree < 0) throw RegressionError("basis degree must be >= 0");
        const bool use_state = family == BasisFamily::poly_wx && state != nullptr;
        const int n_state = use_state ? static_cast<int>(state->cols()) : 0;
        const auto ex = exponents(n_state);
        const auto rows = w.size();
        Matrix F(rows, static_cast<Eigen::Index>(ex.size()));
        for (std::size_t c = 0; c < ex.size(); ++c) {
            Vector col = Vector::Ones(rows);
            for (int v = 0; v <= n_state; ++v) {
                const int power = ex[c][static_cast<std::size_t>(v)];
                if (power == 0) continue;
                const Vector base = v == 0 ? w : Vector(state->col(v - 1));
                for (int r = 0; r < power; ++r) col = col.cwiseProduct(base);
            }
            F.col(static_cast<Eigen::Index>(c)) = col;
        }
        return F;
    }
};

struct RegressionFit {
    Matrix coefficients;  // p x q, row 0 is the intercept, in unscaled feature units
    Matrix fitted;        // rows x q
    double condition_number = 1.0;
    double residual_rms = 0.0;
};

/// Least squares of `targets` on `features` (column 0 constant). The intercept is not
/// penalized; the remaining columns are centered, RMS-scaled and ridge-regularized with
/// lambda = 1e-10 * trace(Gram) / (p - 1).
inline RegressionFit regress(const Matrix& features, const Matrix& targets) {
    const auto rows = features.rows();
    const auto p = features.cols();
    if (rows < 1 || p < 1 || targets.rows() != rows) {
        throw RegressionError("regression shapes inconsistent");
    }
    if (!features.allFinite() || !targets.allFinite()) {
        throw RegressionError("non-finite regression input");
    }
    const auto q = targets.cols();
    const Eigen::RowVectorXd y_mean = targets.colwise().mean();
    RegressionFit fit;
    fit.coefficients = Matrix::Zero(p, q);
    fit.coefficients.row(0) = y_mean;
    fit.fitted = y_mean.replicate(rows, 1);

    if (p > 1) {
        Matrix Fs = features.rightCols(p - 1);
        const Eigen::RowVectorXd mu = Fs.colwise().mean();
        Fs.rowwise() -= mu;
        Eigen::RowVectorXd scale = (Fs.array().square().colwise().mean()).sqrt().matrix();
        for (Eigen::Index c = 0; c < scale.size(); ++c) {
            if (!(scale(c) > 1e-300)) {
                Fs.col(c).setZero();  // constant column: carries no information
                scale(c) = 1.0;
            }
        }
        Fs.array().rowwise() /= scale.array();

        Matrix gram = Fs.transpose() * Fs;
        const double trace = gram.trace();
        if (trace > 0.0) {
            const double lambda = 1e-10 * trace / static_cast<double>(p - 1);
            gram.diagonal().array() += lambda;
            Eigen::LDLT<Matrix> ldlt(gram);
            if (ldlt.info() != Eigen::Success) throw RegressionError("ridge normal equations failed");
            const Matrix centered = targets.rowwise() - y_mean;
            const Matrix beta = ldlt.solve(Fs.transpose() * centered);
            if (!beta.allFinite()) throw RegressionError("rank collapse: non-finite coefficients");

            Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
            const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
            if (!(lo > 0.0)) throw RegressionError("rank collapse even with ridge");
            fit.condition_number = hi / lo;

            fit.fitted += Fs * beta;
            const Matrix slopes = beta.array().colwise() / scale.transpose().array();
            fit.coefficients.bottomRows(p - 1) = slopes;
            fit.coefficients.row(0) -= mu * slopes;
        }
    }
    fit.residual_rms = std::sqrt((targets - fit.fitted).squaredNorm() / static_cast<double>(rows));
    return fit;
}

/// Evaluates a fitted regression at new points.
inline Matrix predict(const RegressionBasis& basis, const Matrix& coefficients, const Vector& w,
                      const Matrix* state = nullptr) {
    return basis.features(w, state) * coefficients;
}

}  // namespace slq
