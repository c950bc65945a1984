#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "slq/bsde.hpp"
#include "slq/config.hpp"
#include "slq/io.hpp"
#include "slq/lattice.hpp"
#include "slq/operators.hpp"
#include "slq/riccati.hpp"
#include "slq/sde_sim.hpp"
#include "slq/verify.hpp"

// The four slqlab commands. Each writes its artifacts under cfg.output_dir and returns the
// process exit status.

namespace slqlab {

using namespace slq;
namespace fs = std::filesystem;

struct RouteResult {
    std::string route;
    int parameter = 0;  // tree depth or time steps
    double value = 0.0;
    double std_error = 0.0;
    double lambda_min = std::numeric_limits<double>::quiet_NaN();
    std::string error;
    bool ok() const { return error.empty(); }
};

inline std::string csv_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline void write_manifest(const ExperimentConfig& cfg, const std::string& command) {
    Json m;
    m["version"] = artifact_version;
    m["command"] = command;
    m["config"] = cfg.resolved;
    write_text_atomically(fs::path(cfg.output_dir) / "manifest.json", m.dump(2) + "\n");
}

/// Accepts either a config document or a manifest written by a previous run.
inline ExperimentConfig load_experiment(const std::string& path, const ConfigOverrides& ov) {
    Json doc = read_json_file(path);
    if (doc.is_object() && doc.contains("config") && doc.contains("version")) doc = doc["config"];
    return resolve_config(std::move(doc), ov);
}

inline bool is_tree_route(const std::string& r) { return r == "tree" || r == "sre-tree" || r == "cg"; }

inline std::optional<double> analytic_value(const ExperimentConfig& cfg) {
    const double x2 = cfg.xi.squaredNorm();
    if (cfg.problem_name == "example-3-7") return x2 * problems::example_3_7_riccati(0.0);
    if (cfg.problem_name == "zero") return 0.0;
    if (cfg.problem_name == "tanh-terminal") return 2.0 * x2;
    return std::nullopt;
}

inline FeedbackPolicy ode_policy(const LQProblem& p, int steps) {
    return gain_table_policy(gain_rows(solve_riccati_ode(p, steps)));
}

inline FeedbackPolicy lsmc_policy(const LQProblem& p, const LsmcRiccati& sol) {
    FeedbackPolicy policy;
    policy.gain = [&p, sol](int k, double, double w) { return sol.gain(p, k, w); };
    policy.gain_depends_on_w = !p.is_deterministic();
    return policy;
}

/// One solver route at one resolution; `write` also exports its tables.
inline RouteResult run_route(const ExperimentConfig& cfg, const std::string& route, int parameter, bool write) {
    RouteResult res;
    res.route = route;
    res.parameter = parameter;
    const auto& p = cfg.problem;
    const fs::path out(cfg.output_dir);
    const Vector& xi = cfg.xi;
    try {
        if (route == "ode") {
            const auto sol = solve_riccati_ode(p, parameter);
            res.value = xi.dot(sol.P.front() * xi);
            res.lambda_min = sol.lambda_min_overall;
            if (write) {
                write_atomically(out / "ode_riccati.csv", [&](std::ostream& os) {
                    write_gain_table(os, p.dims.n, p.dims.m, gain_rows(sol));
                });
                std::vector<double> t(sol.times.begin(), sol.times.end());
                std::vector<double> lm(sol.lambda_min.begin(), sol.lambda_min.end());
                write_text_atomically(out / "lambda_min_ode.svg",
                                      svg_line_plot("lambda_min(R + D'PD), ODE route", "t", "lambda_min",
                                                    {{"ode " + std::to_string(parameter) + " steps", t, lm}}));
            }
        } else if (route == "sre-tree") {
            const TreeModel model(build_tree(parameter, p.horizon), p);
            const auto sol = solve_sre_tree(model);
            res.value = xi.dot(sol.P(0, 0) * xi);
            res.lambda_min = sol.lambda_min;
            if (write) {
                write_atomically(out / "sre_tree_riccati.csv", [&](std::ostream& os) {
                    write_gain_table(os, p.dims.n, p.dims.m, gain_rows(model, sol));
                });
                write_atomically(out / "sre_tree_P.csv",
                                 [&](std::ostream& os) { write_tree_csv(os, model.tree(), sol.P); });
                std::vector<double> t, lm;
                for (int k = 0; k < parameter; ++k) {
                    t.push_back(model.tree().time(k));
                    lm.push_back(sol.lambda_min_by_level[static_cast<std::size_t>(k)]);
                }
                write_text_atomically(out / "lambda_min_sre_tree.svg",
                                      svg_line_plot("lambda_min(R + D'PD), tree SRE", "t", "lambda_min",
                                                    {{"depth " + std::to_string(parameter), t, lm}}));
            }
        } else if (route == "tree") {
            const TreeModel model(build_tree(parameter, p.horizon), p);
            const auto sol = dp_solve(model);
            res.value = sol.value(xi);
            res.lambda_min = sol.min_hessian_eigenvalue;
            if (write) {
                write_atomically(out / "tree_P.csv", [&](std::ostream& os) { write_tree_csv(os, model.tree(), sol.P); });
                write_atomically(out / "tree_theta.csv",
                                 [&](std::ostream& os) { write_tree_csv(os, model.tree(), sol.theta); });
            }
        } else if (route == "cg") {
            const TreeModel model(build_tree(parameter, p.horizon), p);
            const OperatorContext ctx(model);
            const auto cg = solve_open_loop_cg(ctx, xi, cfg.tol.cg);
            res.value = ctx.cost(xi, cg.u);
            if (write) {
                write_atomically(out / "cg_control.csv",
                                 [&](std::ostream& os) { write_tree_csv(os, model.tree(), cg.u); });
                write_atomically(out / "cg_trace.csv", [&](std::ostream& os) { write_cg_trace_csv(os, cg.trace); });
            }
        } else if (route == "lsmc") {
            const auto ens = generate_ensemble(parameter, cfg.carrier.paths, p.horizon, cfg.seed);
            const auto sol = solve_sre_lsmc(p, ens, cfg.carrier.degree);
            res.value = xi.dot(sol.P0 * xi);
            res.std_error = xi.cwiseAbs().dot(sol.P0_std_error * xi.cwiseAbs());
            res.lambda_min = sol.lambda_min;
            if (write) {
                std::vector<double> grid;
                for (int i = -12; i <= 12; ++i) grid.push_back(0.25 * i * std::sqrt(p.horizon));
                write_atomically(out / "lsmc_gains.csv", [&](std::ostream& os) {
                    write_gain_table(os, p.dims.n, p.dims.m, gain_rows(p, sol, grid));
                });
                std::vector<double> t, lm;
                for (std::size_t k = 0; k < sol.lambda_min_by_step.size(); ++k) {
                    t.push_back(static_cast<double>(k) * sol.dt);
                    lm.push_back(sol.lambda_min_by_step[k]);
                }
                write_text_atomically(out / "lambda_min_lsmc.svg",
                                      svg_line_plot("lambda_min(R + D'PD), LSMC", "t", "lambda_min",
                                                    {{std::to_string(parameter) + " steps", t, lm}}));
            }
        } else if (route == "mc") {
            const auto ens = generate_ensemble(parameter, cfg.carrier.paths, p.horizon, cfg.seed);
            StateEnsemble se;
            if (p.is_deterministic()) {
                const int refine = std::max(1, cfg.ode_steps / parameter);
                se = simulate(p, ode_policy(p, refine * parameter), xi, ens);
            } else {
                const auto train = generate_ensemble(parameter, cfg.carrier.paths, p.horizon, cfg.seed + 1);
                const auto sol = solve_sre_lsmc(p, train, cfg.carrier.degree);
                se = simulate(p, lsmc_policy(p, sol), xi, ens);
            }
            const auto est = evaluate_cost(p, ens, se);
            res.value = est.mean;
            res.std_error = est.std_error;
        } else {
            throw ConfigError("unknown route " + route);
        }
    } catch (const std::exception& e) {
        res.error = e.what();
    }
    return res;
}

inline int route_parameter(const ExperimentConfig& cfg, const std::string& route) {
    if (route == "ode") return cfg.ode_steps;
    if (is_tree_route(route)) return cfg.carrier.depth;
    return cfg.carrier.steps;
}

inline void write_values_csv(const fs::path& path, const std::vector<RouteResult>& rows) {
    write_atomically(path, [&](std::ostream& os) {
        os << "route,parameter,value,std_error,lambda_min,error\n";
        for (const auto& r : rows) {
            os << r.route << ',' << r.parameter << ',' << csv_double(r.value) << ',' << csv_double(r.std_error) << ','
               << csv_double(r.lambda_min) << ",\"" << r.error << "\"\n";
        }
    });
}

inline int report_errors(const std::vector<RouteResult>& rows) {
    int bad = 0;
    for (const auto& r : rows) {
        if (!r.ok()) {
            std::cerr << "route " << r.route << " (" << r.parameter << "): " << r.error << '\n';
            ++bad;
        }
    }
    return bad;
}

inline int cmd_solve(const ExperimentConfig& cfg) {
    write_manifest(cfg, "solve");
    std::vector<RouteResult> rows;
    for (const auto& r : cfg.routes) rows.push_back(run_route(cfg, r, route_parameter(cfg, r), true));
    write_values_csv(fs::path(cfg.output_dir) / "values.csv", rows);
    for (const auto& r : rows) {
        if (r.ok()) {
            std::cout << r.route << " (" << r.parameter << "): value " << csv_double(r.value);
            if (r.std_error > 0.0) std::cout << " +- " << r.std_error;
            std::cout << '\n';
        }
    }
    return report_errors(rows) == 0 ? 0 : 1;
}

/// Runs the configured refinement: depths for tree routes, step counts for the others.
inline std::vector<RouteResult> run_sweep(const ExperimentConfig& cfg) {
    std::vector<RouteResult> rows;
    for (const auto& r : cfg.routes) {
        const auto& params = is_tree_route(r) ? cfg.sweep.depths : cfg.sweep.steps;
        for (int q : params) rows.push_back(run_route(cfg, r, q, false));
    }
    return rows;
}

inline void write_convergence_plot(const ExperimentConfig& cfg, const std::vector<RouteResult>& rows) {
    std::vector<PlotSeries> tree_series, step_series;
    for (const auto& route : cfg.routes) {
        PlotSeries s{route, {}, {}};
        for (const auto& r : rows)
            if (r.route == route && r.ok()) {
                s.x.push_back(r.parameter);
                s.y.push_back(r.value);
            }
        (is_tree_route(route) ? tree_series : step_series).push_back(std::move(s));
    }
    const fs::path out(cfg.output_dir);
    if (!tree_series.empty())
        write_text_atomically(out / "value_vs_depth.svg",
                              svg_line_plot("value at xi vs tree depth", "depth", "value", tree_series));
    if (!step_series.empty())
        write_text_atomically(out / "value_vs_steps.svg",
                              svg_line_plot("value at xi vs time steps", "steps", "value", step_series));
}

inline int cmd_sweep(const ExperimentConfig& cfg) {
    write_manifest(cfg, "sweep");
    const auto rows = run_sweep(cfg);
    write_values_csv(fs::path(cfg.output_dir) / "sweep.csv", rows);
    write_convergence_plot(cfg, rows);
    return report_errors(rows) == 0 ? 0 : 1;
}

/// Per-resolution values against the analytic value (when known) and pairwise gaps between
/// the routes at their finest resolution.
inline int cmd_compare(const ExperimentConfig& cfg) {
    if (cfg.routes.size() < 2) throw ConfigError("compare needs at least two routes");
    write_manifest(cfg, "compare");
    const auto rows = run_sweep(cfg);
    const auto exact = analytic_value(cfg);
    const fs::path out(cfg.output_dir);
    write_atomically(out / "compare.csv", [&](std::ostream& os) {
        os << "route,parameter,value,std_error,analytic,gap_to_analytic,error\n";
        for (const auto& r : rows) {
            os << r.route << ',' << r.parameter << ',' << csv_double(r.value) << ',' << csv_double(r.std_error) << ',';
            if (exact && r.ok()) os << csv_double(*exact) << ',' << csv_double(std::abs(r.value - *exact));
            else os << ',';
            os << ",\"" << r.error << "\"\n";
        }
    });
    std::vector<RouteResult> finest;
    for (const auto& route : cfg.routes) {
        const RouteResult* best = nullptr;
        for (const auto& r : rows)
            if (r.route == route && r.ok() && (!best || r.parameter >= best->parameter)) best = &r;
        if (best) finest.push_back(*best);
    }
    write_atomically(out / "pairwise.csv", [&](std::ostream& os) {
        os << "route_a,parameter_a,route_b,parameter_b,value_a,value_b,gap,three_std_error,within_three_std_error\n";
        for (std::size_t a = 0; a < finest.size(); ++a)
            for (std::size_t b = a + 1; b < finest.size(); ++b) {
                const auto& x = finest[a];
                const auto& y = finest[b];
                const double gap = std::abs(x.value - y.value);
                const double se3 = 3.0 * std::hypot(x.std_error, y.std_error);
                os << x.route << ',' << x.parameter << ',' << y.route << ',' << y.parameter << ','
                   << csv_double(x.value) << ',' << csv_double(y.value) << ',' << csv_double(gap) << ','
                   << csv_double(se3) << ',' << (gap <= se3 ? 1 : 0) << '\n';
            }
    });
    write_convergence_plot(cfg, rows);
    for (const auto& r : finest) {
        std::cout << r.route << " (" << r.parameter << "): " << csv_double(r.value);
        if (exact) std::cout << "  gap to analytic " << std::abs(r.value - *exact);
        std::cout << '\n';
    }
    return report_errors(rows) == 0 ? 0 : 1;
}

namespace detail {

inline CheckReport failed_report(const std::string& name, const std::string& carrier, const std::string& what) {
    CheckReport r{name, {}, {}, carrier};
    r.add("error: " + what, std::numeric_limits<double>::infinity(), 0.0);
    return r;
}

/// Tree-carrier state shared by the checks; solves are done on first use.
struct TreeSuite {
    const ExperimentConfig& cfg;
    TreeModel model;
    OperatorContext ctx;
    std::optional<ControlVector> u;
    std::optional<DpSolution> dp;
    std::optional<TreeProcess<Matrix>> P;

    explicit TreeSuite(const ExperimentConfig& c)
        : cfg(c), model(build_tree(c.carrier.depth, c.problem.horizon), c.problem), ctx(model) {}

    const ControlVector& control() {
        if (!u) u = cfg.control == "zero" ? ctx.zero_control() : solve_open_loop_cg(ctx, cfg.xi, cfg.tol.cg).u;
        return *u;
    }
    const DpSolution& dynamic_programming() {
        if (!dp) dp = dp_solve(model);
        return *dp;
    }
    const TreeProcess<Matrix>& riccati() {
        if (!P) P = riccati_reference(model);
        return *P;
    }

    CheckReport run(const std::string& check) {
        const auto& xi = cfg.xi;
        const auto& t = cfg.tol;
        if (check == "stationarity") return check_stationarity(ctx, xi, control(), t.stationarity);
        if (check == "value_representation") return check_value_representation(ctx, xi, control(), riccati(), t.value);
        if (check == "closed_loop")
            return check_closed_loop_agreement(ctx, xi, control(), dynamic_programming().theta, t.closed_loop_cost,
                                               t.closed_loop_path);
        if (check == "yx_identity") return check_yx_identity(ctx, riccati(), t.yx, t.cg, &dynamic_programming().P);
        if (check == "optimality_principle") {
            const int k_mid = cfg.k_mid >= 0 ? cfg.k_mid : model.tree().depth() / 2;
            return check_optimality_principle(ctx, xi, control(), k_mid, t.optimality);
        }
        if (check == "cost_perturbation")
            return check_cost_perturbation(ctx, xi, control(), cfg.perturbations, cfg.seed, t.perturbation, t.gap_law);
        if (check == "convexity_probe") return check_convexity(ctx, cfg.convexity_samples, cfg.seed);
        if (check == "cg_solvable") return check_cg_solvable(ctx, xi, t.cg);
        throw ConfigError("unknown check " + check);
    }
};

/// Ensemble carrier: checks on the LSMC feedback control, with regression expectations.
struct EnsembleSuite {
    const ExperimentConfig& cfg;
    PathEnsemble ens;
    std::optional<LsmcRiccati> sol;

    explicit EnsembleSuite(const ExperimentConfig& c)
        : cfg(c), ens(generate_ensemble(c.carrier.steps, c.carrier.paths, c.problem.horizon, c.seed)) {}

    FeedbackPolicy policy() {
        const auto& p = cfg.problem;
        if (p.is_deterministic()) return ode_policy(p, std::max(1, cfg.ode_steps / ens.steps) * ens.steps);
        if (!sol) sol = solve_sre_lsmc(p, ens, cfg.carrier.degree);
        return lsmc_policy(p, *sol);
    }

    CheckReport run(const std::string& check) {
        const auto& p = cfg.problem;
        if (check == "stationarity") {
            EnsembleControl u;
            if (cfg.control == "zero") {
                u.assign(static_cast<std::size_t>(ens.steps),
                         Matrix::Zero(static_cast<Eigen::Index>(ens.paths), p.dims.m));
            } else {
                u = simulate(p, policy(), cfg.xi, ens).u;
            }
            RegressionEngine engine(ens, RegressionBasis{BasisFamily::poly_wx, cfg.carrier.degree});
            return check_stationarity(p, engine, cfg.xi, u, cfg.tol.stationarity);
        }
        if (check == "cost_perturbation")
            return check_cost_perturbation(p, ens, policy(), cfg.xi, cfg.perturbations, cfg.seed + 1);
        throw ConfigError("check " + check + " needs a tree carrier");
    }
};

}  // namespace detail

inline std::vector<CheckReport> run_checks(const ExperimentConfig& cfg) {
    std::vector<CheckReport> reports;
    const bool tree = cfg.carrier.kind == "tree";
    const std::string carrier = tree ? "tree depth " + std::to_string(cfg.carrier.depth)
                                     : "ensemble " + std::to_string(cfg.carrier.paths) + " paths";
    std::optional<detail::TreeSuite> ts;
    std::optional<detail::EnsembleSuite> es;
    for (const auto& check : cfg.checks) {
        CheckReport r;
        try {
            if (tree) {
                if (!ts) ts.emplace(cfg);
                r = ts->run(check);
            } else {
                if (!es) es.emplace(cfg);
                r = es->run(check);
            }
        } catch (const std::exception& e) {
            r = detail::failed_report(check, carrier, e.what());
        }
        r.expected_failure = cfg.expected_to_fail(check);
        reports.push_back(std::move(r));
    }
    std::stable_sort(reports.begin(), reports.end(),
                     [](const CheckReport& a, const CheckReport& b) { return a.name < b.name; });
    return reports;
}

inline int cmd_verify(const ExperimentConfig& cfg) {
    write_manifest(cfg, "verify");
    const auto reports = run_checks(cfg);
    const fs::path out(cfg.output_dir);
    write_atomically(out / "checks.csv", [&](std::ostream& os) { write_reports_csv(os, reports); });
    std::ostringstream summary;
    write_summary(summary, reports);
    write_text_atomically(out / "summary.txt", summary.str());
    std::cout << summary.str();
    const bool all_ok = std::all_of(reports.begin(), reports.end(), [](const CheckReport& r) { return r.ok(); });
    return all_ok ? 0 : 1;
}

}  // namespace slqlab
