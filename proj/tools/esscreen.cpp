// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "esscreen/esscreen.hpp"

namespace fs = std::filesystem;
using namespace esscreen;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string profile;
    std::string out;
    std::optional<unsigned> threads;
};

ExperimentConfig resolve(const Globals& g)
{
    ExperimentConfig c = g.config.empty() ? parse_config(nlohmann::json::object(), g.profile) : load_config(g.config, g.profile);
    if (g.seed) c.seed = *g.seed;
    if (!g.out.empty()) c.out = g.out;
    if (g.threads) c.threads = *g.threads;
    if (fs::path(c.policy_path).is_relative()) c.policy_path = (fs::path(c.out) / c.policy_path).string();
    c.validate();
    return c;
}

void save_json(const fs::path& p, const nlohmann::json& j)
{
    std::ostringstream os;
    dump17(os, j);
    os << '\n';
    write_text(p, os.str());
}

int cmd_plan(const ExperimentConfig& c)
{
    fs::create_directories(c.out);
    nlohmann::json j;
    const HeuristicParams hp = heuristic_params(c);
    const HeuristicChoice num = heuristic_numeric(hp);
    nlohmann::json h = {{"numeric", strategy_json(num.strategy(hp))}};
    h["numeric"]["q1"] = num.q1;
    h["numeric"]["N1"] = num.N1;
    h["numeric"]["h0"] = num.value;
    if (hp.p == 1.0) {
        const ClosedFormResult cf = heuristic_closed_form(hp);
        h["closed_form"] = {{"q1_2", cf.q1_2}, {"q1_11", cf.q1_11}, {"q1_12", cf.q1_12},
                            {"table_row", cf.table_row}, {"q1_real", cf.q1_real}, {"q1", cf.q1}};
    }
    h["used"] = strategy_json(resolve_heuristic(c));
    j["heuristic"] = h;
    j["uniform"] = strategy_json(uniform_strategy(c.n_s, c.n_w, c.K));
    if (!c.n_grid.empty()) {
        ScenarioParams theta{prior_mean(c), build_equicorrelated({c.sigma, c.rho_train}, c.n_s)};
        j["deterministic"] = plan_to_json(dp_optimize(planning_grid(c), theta, c.sub));
    } else if (c.deterministic_strategy) {
        j["deterministic"] = strategy_json(*c.deterministic_strategy);
    }
    save_json(fs::path(c.out) / "plan.json", j);
    std::printf("heuristic: %s\n", resolve_heuristic(c).str().c_str());
    if (j.contains("deterministic"))
        std::printf("deterministic: %s\n",
                    Strategy::from_lists(j["deterministic"]["q"], j["deterministic"]["N"]).str().c_str());
    std::printf("wrote %s\n", (fs::path(c.out) / "plan.json").string().c_str());
    return 0;
}

int cmd_train(const ExperimentConfig& c)
{
    fs::create_directories(c.out);
    const auto t0 = std::chrono::steady_clock::now();
    FitReport rep;
    const PolicyBundle b = fit_value_functions(adaptive_config(c), experiment_prior(c, c.rho_train), &rep);
    save_bundle(b, c.policy_path);
    nlohmann::json nets = nlohmann::json::array();
    for (const auto& n : rep.nets)
        nets.push_back({{"level", n.level}, {"q", n.q}, {"samples", n.samples}, {"winner", n.winner},
                        {"rate", n.final_rate}, {"first_loss", n.first_loss}, {"last_loss", n.last_loss}});
    nlohmann::json strategies = nlohmann::json::array();
    for (const auto& s : rep.strategies) strategies.push_back(strategy_json(s));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_json(fs::path(c.out) / "training.json",
              {{"profile", c.profile}, {"seed", c.seed}, {"nets", nets}, {"strategies", strategies}});
    std::printf("trained %zu nets in %.1f s, wrote %s\n", rep.nets.size(), secs, c.policy_path.c_str());
    return 0;
}

int cmd_run(ExperimentConfig c, std::optional<int> runs, const std::vector<std::string>& algs)
{
    if (runs) c.runs = *runs;
    if (!algs.empty()) {
        c.algorithms.clear();
        for (const auto& a : algs) c.algorithms.push_back(parse_algorithm(a));
    }
    c.validate();
    const ExperimentResult r = run_experiment(c);
    write_outputs(c, r, c.out);
    std::fputs(metrics_table(r.metrics).c_str(), stdout);
    return 0;
}

int cmd_report(const ExperimentConfig& c)
{
    const fs::path dir(c.out);
    const auto recs = read_runs_csv(dir / "runs.csv");
    if (recs.empty()) throw std::runtime_error("runs.csv has no records");
    std::vector<Algorithm> algs;
    for (const auto& r : recs)
        if (std::find(algs.begin(), algs.end(), r.algorithm) == algs.end()) algs.push_back(r.algorithm);
    std::vector<AlgorithmMetrics> ms;
    for (Algorithm a : algs) ms.push_back(compute_metrics(recs, a));
    const std::string table = metrics_table(ms);
    write_text(dir / "table.md", table);
    write_text(dir / "tail.csv", tail_csv(recs, algs, c.tail_pivot, c.tail_points, c.tail_x_max));
    // Relative-error histograms, one file per algorithm.
    for (Algorithm a : algs) {
        std::vector<double> rel;
        for (const auto& r : recs)
            if (r.algorithm == a) rel.push_back(100.0 * r.error() / r.es_true);
        const auto [lo_it, hi_it] = std::minmax_element(rel.begin(), rel.end());
        const int bins = 50;
        const double lo = *lo_it, width = std::max(*hi_it - lo, 1e-12) / bins;
        std::vector<int> count(bins, 0);
        for (double v : rel) ++count[std::min(bins - 1, static_cast<int>((v - lo) / width))];
        std::ostringstream os;
        os << "bin_lo_pct,bin_hi_pct,count\n";
        for (int b = 0; b < bins; ++b) os << fmt17(lo + b * width) << ',' << fmt17(lo + (b + 1) * width) << ',' << count[b] << '\n';
        write_text(dir / (std::string("hist_") + algorithm_name(a) + ".csv"), os.str());
    }
    std::fputs(table.c_str(), stdout);
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multi-level Monte Carlo screening for historical Expected Shortfall"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "JSON configuration file");
    app.add_option("--seed", g.seed, "root seed");
    app.add_option("--profile", g.profile, "scale profile")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--out", g.out, "output directory");
    app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);

    auto* plan = app.add_subcommand("plan", "heuristic and deterministic strategies");
    auto* train = app.add_subcommand("train", "fit the adaptive policy");
    auto* run = app.add_subcommand("run", "run the algorithm comparison");
    auto* report = app.add_subcommand("report", "tables and figure data from runs.csv");
    std::optional<int> runs;
    std::vector<std::string> algs;
    run->add_option("--runs", runs, "override the number of runs")->check(CLI::PositiveNumber);
    run->add_option("--algorithms", algs, "subset of uniform,heuristic,deterministic,adaptive")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 2;
    }

    try {
        const ExperimentConfig c = resolve(g);
        if (*plan) return cmd_plan(c);
        if (*train) return cmd_train(c);
        if (*run) return cmd_run(c, runs, algs);
        if (*report) return cmd_report(c);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << '\n' << app.help();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 3;
}
