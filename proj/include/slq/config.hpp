#pragma once

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "slq/core_model.hpp"
#include "slq/errors.hpp"
#include "slq/problems.hpp"

// Experiment configuration: a JSON document naming a problem (built-in or inline
// coefficient families), a carrier and the command parameters. `resolve` fills every
// default so the resolved document reproduces the run on its own.

namespace slq {

using Json = nlohmann::ordered_json;

inline constexpr const char* artifact_version = "1.0.0";

struct CarrierSpec {
    std::string kind = "tree";  // tree | ensemble
    int depth = 10;
    int steps = 100;
    std::size_t paths = 10000;
    int degree = 3;
};

struct Tolerances {
    double cg = 1e-12;
    double stationarity = 1e-8;
    double value = 0.05;
    double yx = 0.05;
    double optimality = 1e-9;
    double closed_loop_cost = 1e-6;
    double closed_loop_path = 1e-8;
    double perturbation = 1e-9;
    double gap_law = 1e-8;
};

struct SweepSpec {
    std::vector<int> depths;  // tree route refinement
    std::vector<int> steps;   // ensemble / ode refinement
};

struct ExperimentConfig {
    Json resolved;
    std::string problem_name;
    LQProblem problem;
    CarrierSpec carrier;
    std::vector<std::string> routes;
    std::vector<std::string> checks;
    std::set<std::string> expected_failures;
    std::string control = "optimal";  // control fed to verify checks: optimal | zero
    Vector xi;
    Tolerances tol;
    SweepSpec sweep;
    int convexity_samples = 20;
    int perturbations = 30;
    int ode_steps = 10000;
    int k_mid = -1;  // -1: depth / 2
    std::uint64_t seed = 1;
    int threads = 1;
    std::string output_dir = "out";

    bool expected_to_fail(const std::string& check) const { return expected_failures.count(check) > 0; }
};

inline const std::vector<std::string>& builtin_problem_names() {
    static const std::vector<std::string> names{
        "example-3-7",   "standard-condition", "tanh-terminal",          "zero",
        "markov-benchmark", "negated-weights", "suboptimal-zero-control"};
    return names;
}

inline const std::vector<std::string>& known_routes() {
    static const std::vector<std::string> r{"ode", "tree", "sre-tree", "cg", "lsmc", "mc"};
    return r;
}

inline const std::vector<std::string>& known_checks() {
    static const std::vector<std::string> c{
        "stationarity", "value_representation", "closed_loop", "yx_identity", "optimality_principle",
        "cost_perturbation", "convexity_probe", "cg_solvable"};
    return c;
}

namespace detail {

inline Matrix matrix_literal(const Json& j, int rows, int cols, const std::string& what) {
    if (j.is_number()) {
        if (rows != 1 || cols != 1) throw ConfigError(what + ": scalar given for a " + std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
        return Matrix::Constant(1, 1, j.get<double>());
    }
    if (!j.is_array()) throw ConfigError(what + ": expected a row-major array of numbers");
    if (j.size() != static_cast<std::size_t>(rows * cols)) {
        throw ConfigError(what + ": expected " + std::to_string(rows * cols) + " entries, got " +
                          std::to_string(j.size()));
    }
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < cols; ++c) {
            const auto& v = j[static_cast<std::size_t>(i * cols + c)];
            if (!v.is_number()) throw ConfigError(what + ": non-numeric entry");
            m(i, c) = v.get<double>();
        }
    return m;
}

inline std::function<double(double)> w_function(const std::string& family) {
    if (family == "sin-w") return [](double x) { return std::sin(x); };
    if (family == "cos-w") return [](double x) { return std::cos(x); };
    if (family == "tanh-w") return [](double x) { return std::tanh(x); };
    return {};
}

/// Field spec: a row-major array (constant) or {"family": ..., ...}.
inline MatrixField parse_field(const Json& j, int rows, int cols, const std::string& what) {
    if (j.is_null()) return MatrixField::constant(Matrix::Zero(rows, cols));
    if (!j.is_object()) return MatrixField::constant(matrix_literal(j, rows, cols, what));
    const std::string family = j.value("family", "constant");
    if (family == "constant") return MatrixField::constant(matrix_literal(j.at("value"), rows, cols, what));
    if (family == "poly-t") {
        if (!j.contains("coefficients") || !j["coefficients"].is_array() || j["coefficients"].empty())
            throw ConfigError(what + ": poly-t needs a non-empty \"coefficients\" list");
        std::vector<Matrix> c;
        for (const auto& e : j["coefficients"]) c.push_back(matrix_literal(e, rows, cols, what));
        return MatrixField::time_varying([c](double t) {
            Matrix out = c.back();
            for (auto it = c.rbegin() + 1; it != c.rend(); ++it) out = (out * t + *it).eval();
            return out;
        });
    }
    if (family == "affine-w") {
        const Matrix base = matrix_literal(j.at("value"), rows, cols, what);
        const Matrix slope = matrix_literal(j.at("slope"), rows, cols, what);
        return MatrixField::markov([base, slope](double, double w) { return Matrix(base + w * slope); });
    }
    if (auto f = w_function(family)) {
        const Matrix base = matrix_literal(j.at("value"), rows, cols, what);
        const Matrix amp = matrix_literal(j.at("amplitude"), rows, cols, what);
        const double freq = j.value("frequency", 1.0);
        return MatrixField::markov(
            [base, amp, freq, f](double, double w) { return Matrix(base + f(freq * w) * amp); });
    }
    throw ConfigError(what + ": unknown family \"" + family + "\"");
}

/// Largest entry over the validation window (t lattice, |w| <= 3 sqrt(T)).
inline double probed_bound(const std::vector<const MatrixField*>& fields, double horizon) {
    double b = 0.0;
    const double wmax = 3.0 * std::sqrt(horizon);
    for (const auto* f : fields) {
        for (int i = 0; i <= 100; ++i) {
            const double t = horizon * i / 100.0;
            for (int l = 0; l <= (f->depends_on_w() ? 100 : 0); ++l) {
                const double w = f->depends_on_w() ? -wmax + 2.0 * wmax * l / 100.0 : 0.0;
                const Matrix v = (*f)(t, w);
                if (v.size() > 0) b = std::max(b, v.cwiseAbs().maxCoeff());
            }
        }
    }
    return std::max(b, 1e-300);
}

inline LQProblem parse_inline_problem(const Json& j) {
    LQProblem p;
    p.name = j.value("name", "inline");
    p.dims.n = j.value("n", 1);
    p.dims.m = j.value("m", 1);
    p.horizon = j.value("horizon", 1.0);
    const int n = p.dims.n, m = p.dims.m;
    if (n < 1 || m < 1) throw ConfigError("problem dimensions must be positive");
    if (!(p.horizon > 0.0)) throw ConfigError("problem horizon must be positive");
    auto get = [&](const char* key) { return j.contains(key) ? j[key] : Json(); };
    p.coeffs.A = parse_field(get("A"), n, n, "A");
    p.coeffs.B = parse_field(get("B"), n, m, "B");
    p.coeffs.C = parse_field(get("C"), n, n, "C");
    p.coeffs.D = parse_field(get("D"), n, m, "D");
    p.weights.Q = parse_field(get("Q"), n, n, "Q");
    p.weights.S = parse_field(get("S"), m, n, "S");
    p.weights.R = parse_field(get("R"), m, m, "R");
    const MatrixField G = parse_field(get("G"), n, n, "G");
    const double T = p.horizon;
    p.weights.G = [G, T](double w) { return G(T, w); };
    p.weights.G_random = G.depends_on_w();
    p.coeffs.bound = j.contains("coefficient_bound")
                         ? j["coefficient_bound"].get<double>()
                         : probed_bound({&p.coeffs.A, &p.coeffs.B, &p.coeffs.C, &p.coeffs.D}, T);
    p.weights.bound = j.contains("weight_bound")
                          ? j["weight_bound"].get<double>()
                          : std::max(probed_bound({&p.weights.Q, &p.weights.S, &p.weights.R}, T),
                                     probed_bound({&G}, T));
    return p;
}

inline LQProblem builtin_problem(const std::string& name) {
    if (name == "example-3-7" || name == "suboptimal-zero-control") return problems::example_3_7();
    if (name == "standard-condition") return problems::standard_condition();
    if (name == "tanh-terminal") return problems::tanh_terminal();
    if (name == "zero") return problems::zero(1, 1);
    if (name == "markov-benchmark") return problems::markov_benchmark();
    if (name == "negated-weights") {
        auto p = problems::negated(problems::standard_condition());
        p.name = "negated-weights";
        return p;
    }
    throw ConfigError("unknown built-in problem \"" + name + "\"");
}

template <class T>
std::vector<T> list_of(const Json& j, const std::string& key) {
    std::vector<T> out;
    if (!j.contains(key)) return out;
    if (!j[key].is_array()) throw ConfigError("\"" + key + "\" must be a list");
    for (const auto& e : j[key]) out.push_back(e.get<T>());
    return out;
}

}  // namespace detail

/// Overrides from the command line; unset fields leave the document untouched.
struct ConfigOverrides {
    std::optional<std::string> output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
};

/// Parses and resolves a configuration document; the result's `resolved` field holds every
/// effective setting.
inline ExperimentConfig resolve_config(Json doc, const ConfigOverrides& ov = {}) {
    if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
    if (ov.output_dir) doc["output_dir"] = *ov.output_dir;
    if (ov.seed) doc["seed"] = *ov.seed;
    if (ov.threads) doc["threads"] = *ov.threads;

    ExperimentConfig cfg;
    try {
        Json pj = doc.contains("problem") ? doc["problem"] : Json("example-3-7");
        if (pj.is_object() && pj.contains("builtin")) pj = pj["builtin"];
        if (pj.is_string()) {
            cfg.problem_name = pj.get<std::string>();
            cfg.problem = detail::builtin_problem(cfg.problem_name);
        } else if (pj.is_object()) {
            cfg.problem = detail::parse_inline_problem(pj);
            cfg.problem_name = cfg.problem.name;
        } else {
            throw ConfigError("\"problem\" must be a built-in name or an inline object");
        }

        const bool negated = cfg.problem_name == "negated-weights";
        const bool subopt = cfg.problem_name == "suboptimal-zero-control";

        const Json cj = doc.value("carrier", Json::object());
        cfg.carrier.kind = cj.value("type", "tree");
        cfg.carrier.depth = cj.value("depth", 10);
        cfg.carrier.steps = cj.value("steps", 100);
        cfg.carrier.paths = cj.value("paths", std::size_t{10000});
        cfg.carrier.degree = cj.value("degree", 3);
        if (cfg.carrier.kind != "tree" && cfg.carrier.kind != "ensemble")
            throw ConfigError("carrier type must be \"tree\" or \"ensemble\"");
        if (cfg.carrier.depth < 1 || cfg.carrier.steps < 1 || cfg.carrier.paths < 1 || cfg.carrier.degree < 0)
            throw ConfigError("carrier sizes must be positive");

        cfg.routes = detail::list_of<std::string>(doc, "routes");
        if (cfg.routes.empty()) cfg.routes = {"ode", "tree", "sre-tree", "cg"};
        for (const auto& r : cfg.routes)
            if (std::find(known_routes().begin(), known_routes().end(), r) == known_routes().end())
                throw ConfigError("unknown route \"" + r + "\"");
        if (!cfg.problem.is_deterministic()) {
            std::erase(cfg.routes, std::string("ode"));
        }

        cfg.checks = detail::list_of<std::string>(doc, "checks");
        if (cfg.checks.empty()) {
            if (negated) cfg.checks = {"convexity_probe", "cg_solvable"};
            else if (subopt) cfg.checks = {"stationarity"};
            else cfg.checks = known_checks();
        }
        for (const auto& c : cfg.checks)
            if (std::find(known_checks().begin(), known_checks().end(), c) == known_checks().end())
                throw ConfigError("unknown check \"" + c + "\"");

        std::vector<std::string> xf;
        if (doc.contains("expected_failures")) xf = detail::list_of<std::string>(doc, "expected_failures");
        else if (negated) xf = {"convexity_probe", "cg_solvable"};
        else if (subopt) xf = {"stationarity", "value_representation", "closed_loop", "optimality_principle", "cost_perturbation"};
        cfg.expected_failures = {xf.begin(), xf.end()};

        cfg.control = doc.value("control", subopt ? "zero" : "optimal");
        if (cfg.control != "optimal" && cfg.control != "zero")
            throw ConfigError("control must be \"optimal\" or \"zero\"");

        if (doc.contains("xi")) cfg.xi = detail::matrix_literal(doc["xi"], cfg.problem.dims.n, 1, "xi");
        else cfg.xi = Vector::Ones(cfg.problem.dims.n);

        const Json tj = doc.value("tolerances", Json::object());
        auto& t = cfg.tol;
        t.cg = tj.value("cg", t.cg);
        t.stationarity = tj.value("stationarity", t.stationarity);
        t.value = tj.value("value", t.value);
        t.yx = tj.value("yx", t.yx);
        t.optimality = tj.value("optimality", t.optimality);
        t.closed_loop_cost = tj.value("closed_loop_cost", t.closed_loop_cost);
        t.closed_loop_path = tj.value("closed_loop_path", t.closed_loop_path);
        t.perturbation = tj.value("perturbation", t.perturbation);
        t.gap_law = tj.value("gap_law", t.gap_law);

        const Json sj = doc.value("sweep", Json::object());
        cfg.sweep.depths = detail::list_of<int>(sj, "depths");
        cfg.sweep.steps = detail::list_of<int>(sj, "steps");
        if (cfg.sweep.depths.empty()) cfg.sweep.depths = {8, 10, 12, 14};
        if (cfg.sweep.steps.empty()) cfg.sweep.steps = {25, 50, 100, 200};

        cfg.convexity_samples = doc.value("convexity_samples", 20);
        cfg.perturbations = doc.value("perturbations", 30);
        cfg.ode_steps = doc.value("ode_steps", 10000);
        cfg.k_mid = doc.value("k_mid", -1);
        cfg.seed = doc.value("seed", std::uint64_t{1});
        cfg.threads = doc.value("threads", 1);
        if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
        cfg.output_dir = doc.value("output_dir", "out");
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("configuration: ") + e.what());
    }

    const auto report = validate_problem(cfg.problem);
    if (!report.accepted()) {
        std::string msg = "problem \"" + cfg.problem_name + "\" rejected:";
        for (const auto& v : report.violations) msg += " " + v + ";";
        throw ConfigError(msg);
    }

    Json& r = cfg.resolved;
    r["problem"] = doc.contains("problem") ? doc["problem"] : Json(cfg.problem_name);
    r["carrier"] = {{"type", cfg.carrier.kind},
                    {"depth", cfg.carrier.depth},
                    {"steps", cfg.carrier.steps},
                    {"paths", cfg.carrier.paths},
                    {"degree", cfg.carrier.degree}};
    r["routes"] = cfg.routes;
    r["checks"] = cfg.checks;
    r["expected_failures"] = std::vector<std::string>(cfg.expected_failures.begin(), cfg.expected_failures.end());
    r["control"] = cfg.control;
    r["xi"] = std::vector<double>(cfg.xi.data(), cfg.xi.data() + cfg.xi.size());
    r["tolerances"] = {{"cg", cfg.tol.cg},
                       {"stationarity", cfg.tol.stationarity},
                       {"value", cfg.tol.value},
                       {"yx", cfg.tol.yx},
                       {"optimality", cfg.tol.optimality},
                       {"closed_loop_cost", cfg.tol.closed_loop_cost},
                       {"closed_loop_path", cfg.tol.closed_loop_path},
                       {"perturbation", cfg.tol.perturbation},
                       {"gap_law", cfg.tol.gap_law}};
    r["sweep"] = {{"depths", cfg.sweep.depths}, {"steps", cfg.sweep.steps}};
    r["convexity_samples"] = cfg.convexity_samples;
    r["perturbations"] = cfg.perturbations;
    r["ode_steps"] = cfg.ode_steps;
    r["k_mid"] = cfg.k_mid;
    r["seed"] = cfg.seed;
    r["threads"] = cfg.threads;
    r["output_dir"] = cfg.output_dir;
    return cfg;
}

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open configuration file " + path);
    try {
        return Json::parse(in, nullptr, true, true);
    } catch (const Json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path, const ConfigOverrides& ov = {}) {
    return resolve_config(read_json_file(path), ov);
}

}  // namespace slq
