#include "CLI11.hpp"

#include <iostream>

#include "slqlab_commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"slqlab: stochastic LQ experiments (solve, verify, compare, sweep)"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON configuration or manifest")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "output directory (overrides output_dir)");
        sub->add_option("--seed", seed, "random seed (overrides seed)");
        sub->add_option("--threads", threads, "worker threads (recorded; kernels are deterministic)")
            ->check(CLI::PositiveNumber);
    };
    auto* solve = app.add_subcommand("solve", "run the configured solver routes");
    auto* verify = app.add_subcommand("verify", "run the configured checks");
    auto* compare = app.add_subcommand("compare", "compare routes across a refinement sweep");
    auto* sweep = app.add_subcommand("sweep", "refinement sweep of every route");
    for (auto* s : {solve, verify, compare, sweep}) add_common(s);

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cfg = slqlab::load_experiment(config_path, slq::ConfigOverrides{out, seed, threads});
        if (solve->parsed()) return slqlab::cmd_solve(cfg);
        if (verify->parsed()) return slqlab::cmd_verify(cfg);
        if (compare->parsed()) return slqlab::cmd_compare(cfg);
        return slqlab::cmd_sweep(cfg);
    } catch (const slq::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
