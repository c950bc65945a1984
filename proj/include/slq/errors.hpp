#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace slq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Time or argument outside the admissible domain.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Requested carrier is too large or empty.
class SizeError : public Error {
public:
    using Error::Error;
};

/// Two operands live on different carriers (tree depth, initial level, ensemble).
class CarrierMismatch : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// The one-step control Hessian of the discrete dynamic program is not
/// positive definite at a node: the discrete problem has no minimum there.
class IndefiniteHessian : public Error {
public:
    IndefiniteHessian(int level, std::size_t index, double min_eigenvalue)
        : Error("indefinite control Hessian at node (" + std::to_string(level) + "," +
                std::to_string(index) + "), min eigenvalue " + std::to_string(min_eigenvalue)),
          level_(level), index_(index), min_eigenvalue_(min_eigenvalue) {}

    int level() const noexcept { return level_; }
    std::size_t index() const noexcept { return index_; }
    double min_eigenvalue() const noexcept { return min_eigenvalue_; }

private:
    int level_;
    std::size_t index_;
    double min_eigenvalue_;
};

/// R + D'PD became numerically singular while integrating a Riccati equation.
class RiccatiBlowup : public Error {
public:
    RiccatiBlowup(double time, std::string where, double condition_number)
        : Error("Riccati blowup at t=" + std::to_string(time) + " (" + where +
                "), condition number of R+D'PD = " + std::to_string(condition_number)),
          time_(time), where_(std::move(where)), condition_number_(condition_number) {}

    double time() const noexcept { return time_; }
    const std::string& where() const noexcept { return where_; }
    double condition_number() const noexcept { return condition_number_; }

private:
    double time_;
    std::string where_;
    double condition_number_;
};

class GainError : public Error {
public:
    using Error::Error;
};

/// Conjugate gradient met a direction d with [[N d, d]] <= 0.
class NotUniformlyConvex : public Error {
public:
    NotUniformlyConvex(int iteration, double curvature)
        : Error("non-positive curvature " + std::to_string(curvature) + " at CG iteration " +
                std::to_string(iteration)),
          iteration_(iteration), curvature_(curvature) {}

    int iteration() const noexcept { return iteration_; }
    double curvature() const noexcept { return curvature_; }

private:
    int iteration_;
    double curvature_;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(int iterations, double residual)
        : Error("CG did not converge in " + std::to_string(iterations) +
                " iterations, residual " + std::to_string(residual)),
          iterations_(iterations), residual_(residual) {}

    int iterations() const noexcept { return iterations_; }
    double residual() const noexcept { return residual_; }

private:
    int iterations_;
    double residual_;
};

class RegressionError : public Error {
public:
    using Error::Error;
};

/// Non-finite state produced by forward simulation.
class SimulationError : public Error {
public:
    SimulationError(std::size_t path, int step)
        : Error("non-finite state on path " + std::to_string(path) + " at step " +
                std::to_string(step)),
          path_(path), step_(step) {}

    std::size_t path() const noexcept { return path_; }
    int step() const noexcept { return step_; }

private:
    std::size_t path_;
    int step_;
};

}  // namespace slq
