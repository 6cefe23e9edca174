// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "esscreen/adaptive.hpp"
#include "esscreen/parallel.hpp"
#include "esscreen/planner.hpp"
#include "esscreen/screener.hpp"

namespace esscreen {

enum class Algorithm { uniform, heuristic, deterministic, adaptive };

inline const char* algorithm_name(Algorithm a)
{
    switch (a) {
    case Algorithm::uniform: return "uniform";
    case Algorithm::heuristic: return "heuristic";
    case Algorithm::deterministic: return "deterministic";
    case Algorithm::adaptive: return "adaptive";
    }
    return "?";
}

inline Algorithm parse_algorithm(const std::string& s)
{
    if (s == "uniform") return Algorithm::uniform;
    if (s == "heuristic") return Algorithm::heuristic;
    if (s == "deterministic") return Algorithm::deterministic;
    if (s == "adaptive") return Algorithm::adaptive;
    throw config_error("unknown algorithm '" + s + "'");
}

struct ExperimentConfig {
    Index n_s = 253;
    Index n_w = 6;
    Count K = 10000000;
    int L = 4;

    std::string book_source = "synthetic";  // synthetic | file
    double delta0 = 2766.0;
    double book_offset = 0.0;
    std::string book_file;

    double k0 = 300.0;
    double i0 = 300.0;
    double sigma = 2.2e6;
    double rho_train = 0.6;
    double rho_true = 0.6;
    SubGammaParams sub{};

    Count heuristic_n2 = 100000;
    std::optional<Strategy> heuristic_strategy;
    std::optional<Strategy> deterministic_strategy;
    std::vector<Count> q_grid{6, 10, 15, 20, 25, 30, 35, 40, 45, 50, 60, 70, 80, 90, 100, 150, 200, 253};
    std::vector<Count> n_grid;

    int runs = 500;
    std::vector<Algorithm> algorithms{Algorithm::uniform, Algorithm::heuristic, Algorithm::deterministic};
    std::string profile = "desk";
    std::uint64_t seed = 7;
    std::string out = "out";
    unsigned threads = 1;

    std::string policy_path = "policy.cbor";
    AdaptiveConfig adaptive{};

    double tail_pivot = 5000.0;
    int tail_points = 501;
    double tail_x_max = 5000.0;

    bool uses(Algorithm a) const { return std::find(algorithms.begin(), algorithms.end(), a) != algorithms.end(); }

    void validate() const
    {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw config_error(msg);
        };
        need(n_w >= 1 && n_s > n_w, "config: need 1 <= n_w < n_s");
        need(K >= n_s, "config: K must be >= n_s");
        need(L >= 2, "config: L must be >= 2");
        need(runs >= 1, "config: runs must be >= 1");
        need(book_source == "synthetic" || book_source == "file", "config: book.source must be synthetic or file");
        need(book_source == "file" ? !book_file.empty() : delta0 > 0.0, "config: book needs delta0 > 0 or a file");
        need(k0 > 0.0 && i0 > static_cast<double>(n_s) + 1.0, "config: need k0 > 0 and i0 > n_s + 1");
        need(sigma >= 0.0, "config: sigma must be >= 0");
        need(rho_train >= 0.0 && rho_train < 1.0 && rho_true >= 0.0 && rho_true < 1.0, "config: rho must lie in [0,1)");
        need(sub.p >= 1.0 && sub.c >= 0.0, "config: need p >= 1 and c >= 0");
        need(!algorithms.empty(), "config: no algorithms selected");
        need(profile == "desk" || profile == "paper", "config: profile must be desk or paper");
        need(threads >= 1, "config: threads must be >= 1");
        need(tail_points >= 2 && tail_pivot > 0.0 && tail_x_max > 0.0, "config: invalid tail grid");
        for (const auto* s : {&heuristic_strategy, &deterministic_strategy})
            if (*s) {
                const std::string why = (*s)->check(n_s, n_w);
                need(why.empty(), "config: invalid strategy " + (*s)->str() + ": " + why);
                need(cost(**s) <= K, "config: strategy " + (*s)->str() + " exceeds K");
            }
    }
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

inline Strategy strategy_from_json(const nlohmann::json& j)
{
    return Strategy::from_lists(j.at("q").get<std::vector<Count>>(), j.at("N").get<std::vector<Count>>());
}

inline void read_adaptive(const nlohmann::json& j, AdaptiveConfig& a)
{
    auto get = [&](const char* key, auto& dst) {
        if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
    };
    get("k_bar", a.k_bar);
    get("j_bar", a.j_bar);
    get("n_e_final", a.n_e_final);
    get("n_p", a.n_p);
    get("n_e_nonfinal", a.n_e_nonfinal);
    get("quantum", a.quantum);
    get("hidden", a.hidden);
    get("r", a.r);
    get("steps", a.steps);
    get("probe_steps", a.probe_steps);
    get("rate_candidates", a.rate_candidates);
    get("base_rate", a.base_rate);
    get("batch_change", a.batch_change);
    get("j_batch_size", a.j_batch_size);
    get("k_batch_size", a.k_batch_size);
    get("full_matrix_max_q", a.full_matrix_max_q);
    get("chunk_rows", a.chunk_rows);
    if (j.contains("scales")) {
        a.scales.clear();
        for (const auto& s : j.at("scales"))
            a.scales.push_back({s.at("q"), s.at("m"), s.at("sigma"), s.at("N"), s.at("running_cost"), s.at("f")});
    }
}

} // namespace detail

inline AdaptiveConfig profile_defaults(const std::string& profile)
{
    AdaptiveConfig a;
    a.profile = profile;
    if (profile == "paper") {
        a.k_bar = 200;
        a.j_bar = 40;
        a.n_e_final = 1000000;
        a.n_p = 1000;
        a.n_e_nonfinal = 1000;
        a.steps = 1000000;
        a.probe_steps = 100000;
    }
    return a;
}

// Keys not present keep their defaults. `profile_override` (if non-empty)
// replaces the "profile" key before profile sections are applied.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::string& profile_override = "")
{
    ExperimentConfig c;
    try {
        auto get = [](const nlohmann::json& o, const char* key, auto& dst) {
            if (o.contains(key) && !o.at(key).is_null()) dst = o.at(key).get<std::decay_t<decltype(dst)>>();
        };
        get(j, "n_s", c.n_s);
        get(j, "n_w", c.n_w);
        get(j, "K", c.K);
        get(j, "L", c.L);
        if (j.contains("book")) {
            const auto& b = j["book"];
            get(b, "source", c.book_source);
            get(b, "delta0", c.delta0);
            get(b, "offset", c.book_offset);
            get(b, "file", c.book_file);
        }
        if (j.contains("prior")) {
            const auto& p = j["prior"];
            get(p, "k0", c.k0);
            get(p, "i0", c.i0);
            get(p, "sigma", c.sigma);
            get(p, "rho_train", c.rho_train);
        }
        if (j.contains("world")) get(j["world"], "rho_true", c.rho_true);
        if (j.contains("bounds")) {
            get(j["bounds"], "p", c.sub.p);
            get(j["bounds"], "c", c.sub.c);
        }
        if (j.contains("heuristic")) {
            const auto& h = j["heuristic"];
            get(h, "N2", c.heuristic_n2);
            if (h.contains("strategy") && !h["strategy"].is_null()) c.heuristic_strategy = detail::strategy_from_json(h["strategy"]);
        }
        if (j.contains("deterministic")) {
            const auto& d = j["deterministic"];
            if (d.contains("strategy") && !d["strategy"].is_null()) c.deterministic_strategy = detail::strategy_from_json(d["strategy"]);
        }
        if (j.contains("planning")) {
            get(j["planning"], "q_grid", c.q_grid);
            get(j["planning"], "n_grid", c.n_grid);
        }
        get(j, "runs", c.runs);
        if (j.contains("algorithms")) {
            c.algorithms.clear();
            for (const auto& a : j["algorithms"]) c.algorithms.push_back(parse_algorithm(a.get<std::string>()));
        }
        get(j, "profile", c.profile);
        if (!profile_override.empty()) c.profile = profile_override;
        get(j, "seed", c.seed);
        get(j, "out", c.out);
        get(j, "threads", c.threads);
        if (j.contains("report")) {
            get(j["report"], "tail_pivot", c.tail_pivot);
            get(j["report"], "tail_points", c.tail_points);
            get(j["report"], "tail_x_max", c.tail_x_max);
        }
        if (c.profile != "desk" && c.profile != "paper") throw config_error("config: profile must be desk or paper");
        c.adaptive = profile_defaults(c.profile);
        if (j.contains("adaptive")) {
            const auto& a = j["adaptive"];
            get(a, "policy", c.policy_path);
            detail::read_adaptive(a, c.adaptive);
        }
        if (j.contains("profiles") && j["profiles"].contains(c.profile)) {
            const auto& p = j["profiles"][c.profile];
            get(p, "runs", c.runs);
            if (p.contains("adaptive")) detail::read_adaptive(p["adaptive"], c.adaptive);
        }
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("config: ") + e.what());
    }
    return c;
}

inline ExperimentConfig load_config(const std::string& path, const std::string& profile_override = "")
{
    std::ifstream is(path);
    if (!is) throw config_error("config: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config: " + path + ": " + e.what());
    }
    return parse_config(j, profile_override);
}

// ---------------------------------------------------------------------------
// Derived model inputs

inline Vector prior_mean(const ExperimentConfig& c)
{
    if (c.book_source == "synthetic") return synthetic_book(c.n_s, c.delta0, c.book_offset);
    std::ifstream is(c.book_file);
    if (!is) throw config_error("config: cannot open book file " + c.book_file);
    std::vector<double> v;
    double x;
    while (is >> x) v.push_back(x);
    if (static_cast<Index>(v.size()) != c.n_s)
        throw config_error("config: book file has " + std::to_string(v.size()) + " values, expected n_s");
    Vector m(c.n_s);
    for (Index i = 0; i < c.n_s; ++i) m(i) = v[static_cast<std::size_t>(i)] + c.book_offset;
    return m;
}

inline NIWParams experiment_prior(const ExperimentConfig& c, double rho)
{
    return make_prior(prior_mean(c), c.k0, c.i0, build_equicorrelated({c.sigma, rho}, c.n_s));
}

inline AdaptiveConfig adaptive_config(const ExperimentConfig& c)
{
    AdaptiveConfig a = c.adaptive;
    a.n_s = c.n_s;
    a.n_w = c.n_w;
    a.K = c.K;
    a.L = c.L;
    a.q_grid = c.q_grid;
    a.sub = c.sub;
    a.seed = c.seed;
    a.threads = c.threads;
    a.profile = c.profile;
    return a;
}

inline HeuristicParams heuristic_params(const ExperimentConfig& c)
{
    HeuristicParams hp;
    hp.delta0 = c.delta0;
    hp.sigma_bar = std::sqrt(2.0 * (1.0 - c.rho_train)) * c.sigma;
    hp.c = c.sub.c;
    hp.K = c.K;
    hp.N2 = c.heuristic_n2;
    hp.n_s = c.n_s;
    hp.n_w = c.n_w;
    hp.p = c.sub.p;
    return hp;
}

inline PlanningGrid planning_grid(const ExperimentConfig& c)
{
    PlanningGrid g;
    g.q_grid = c.q_grid;
    g.n_grid = c.n_grid;
    g.K = c.K;
    g.L = c.L;
    g.n_s = c.n_s;
    g.n_w = c.n_w;
    return g;
}

// Configured strategy, else the closed-form heuristic choice.
inline Strategy resolve_heuristic(const ExperimentConfig& c)
{
    if (c.heuristic_strategy) return *c.heuristic_strategy;
    const HeuristicParams hp = heuristic_params(c);
    HeuristicChoice ch;
    if (hp.p == 1.0) {
        ch.q1 = heuristic_closed_form(hp).q1;
        ch.N1 = heuristic_first_level_paths(ch.q1, hp);
    } else {
        ch = heuristic_numeric(hp);
    }
    if (ch.N1 > hp.N2)
        throw config_error("heuristic: N1 = " + std::to_string(ch.N1) + " exceeds N2 = " + std::to_string(hp.N2) +
                           "; raise heuristic.N2 or configure heuristic.strategy");
    return ch.strategy(hp);
}

// Configured strategy, else the grid optimum for the prior mean book.
inline Plan resolve_deterministic(const ExperimentConfig& c)
{
    if (c.deterministic_strategy) {
        Plan p;
        p.strategy = *c.deterministic_strategy;
        p.cost = cost(p.strategy);
        return p;
    }
    if (c.n_grid.empty()) throw config_error("config: deterministic needs a strategy or planning.n_grid");
    ScenarioParams theta{prior_mean(c), build_equicorrelated({c.sigma, c.rho_train}, c.n_s)};
    return dp_optimize(planning_grid(c), theta, c.sub);
}

// ---------------------------------------------------------------------------
// Experiment

struct RunRecord {
    int run = 0;
    Algorithm algorithm = Algorithm::uniform;
    double es_hat = 0.0;
    double es_true = 0.0;
    bool correct = false;
    Count cost = 0;
    IndexList selected;
    Strategy realized;

    double error() const { return es_hat - es_true; }
};

struct AlgorithmMetrics {
    Algorithm algorithm = Algorithm::uniform;
    int runs = 0;
    double l1 = 0.0;
    double l1_std = 0.0;   // std of the mean
    double rel = 0.0;      // percent
    double rel_std = 0.0;  // percent, std of the mean
    double l2 = 0.0;
    int correct = 0;
};

struct ExperimentResult {
    std::vector<RunRecord> records;  // run-major, algorithms in config order
    std::vector<AlgorithmMetrics> metrics;
    std::map<std::string, Strategy> fixed_strategies;
};

inline std::vector<double> abs_errors(const std::vector<RunRecord>& recs, Algorithm a)
{
    std::vector<double> out;
    for (const auto& r : recs)
        if (r.algorithm == a) out.push_back(std::abs(r.error()));
    return out;
}

inline AlgorithmMetrics compute_metrics(const std::vector<RunRecord>& recs, Algorithm a)
{
    AlgorithmMetrics m;
    m.algorithm = a;
    double s1 = 0, s1sq = 0, sr = 0, srsq = 0, s2 = 0;
    for (const auto& r : recs) {
        if (r.algorithm != a) continue;
        const double e = std::abs(r.error());
        const double rel = 100.0 * e / std::abs(r.es_true);
        s1 += e;
        s1sq += e * e;
        sr += rel;
        srsq += rel * rel;
        s2 += e * e;
        m.correct += r.correct ? 1 : 0;
        ++m.runs;
    }
    if (m.runs == 0) return m;
    const double n = m.runs;
    m.l1 = s1 / n;
    m.rel = sr / n;
    m.l2 = std::sqrt(s2 / n);
    if (m.runs > 1) {
        m.l1_std = std::sqrt(std::max(0.0, (s1sq - n * m.l1 * m.l1) / (n - 1.0)) / n);
        m.rel_std = std::sqrt(std::max(0.0, (srsq - n * m.rel * m.rel) / (n - 1.0)) / n);
    }
    return m;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const PolicyBundle* policy = nullptr)
{
    cfg.validate();
    std::optional<PolicyBundle> loaded;
    if (cfg.uses(Algorithm::adaptive) && !policy) {
        if (!std::filesystem::exists(cfg.policy_path))
            throw std::runtime_error("adaptive policy artifact not found: " + cfg.policy_path);
        loaded = load_bundle(cfg.policy_path, adaptive_config(cfg));
        policy = &*loaded;
    }
    if (policy && (policy->cfg.n_s != cfg.n_s || policy->cfg.n_w != cfg.n_w || policy->cfg.K != cfg.K))
        throw config_error("adaptive policy was trained for a different n_s/n_w/K");

    ExperimentResult res;
    std::map<Algorithm, Strategy> fixed;
    fixed[Algorithm::uniform] = uniform_strategy(cfg.n_s, cfg.n_w, cfg.K);
    if (cfg.uses(Algorithm::heuristic)) fixed[Algorithm::heuristic] = resolve_heuristic(cfg);
    if (cfg.uses(Algorithm::deterministic)) fixed[Algorithm::deterministic] = resolve_deterministic(cfg).strategy;
    for (const auto& [a, s] : fixed)
        if (cfg.uses(a)) res.fixed_strategies[algorithm_name(a)] = s;

    const NIWParams world = experiment_prior(cfg, cfg.rho_true);
    const std::size_t n_alg = cfg.algorithms.size();
    std::vector<RunRecord> slots(static_cast<std::size_t>(cfg.runs) * n_alg);
    parallel_for(static_cast<std::size_t>(cfg.runs), cfg.threads, [&](std::size_t run) {
        Rng wr = derive_stream(cfg.seed, {stream::world, run});
        const ScenarioParams theta = sample_niw(world, wr);
        const double es_true = exact_es(theta, cfg.n_w);
        GaussianPriceSource src(theta);
        for (std::size_t a = 0; a < n_alg; ++a) {
            const Algorithm alg = cfg.algorithms[a];
            std::uint64_t tag = stream::uniform;
            if (alg == Algorithm::heuristic) tag = stream::heuristic;
            if (alg == Algorithm::deterministic) tag = stream::deterministic;
            if (alg == Algorithm::adaptive) tag = stream::adaptive;
            Rng rng = derive_stream(cfg.seed, {tag, run});
            ScreeningRun sr = alg == Algorithm::adaptive ? run_adaptive(*policy, src, rng).run
                                                         : run_screening(fixed.at(alg), cfg.n_w, src, rng);
            if (sr.pricings > cfg.K)
                throw std::logic_error(std::string("budget audit failed for ") + algorithm_name(alg) + " on run " +
                                       std::to_string(run));
            RunRecord& r = slots[run * n_alg + a];
            r.run = static_cast<int>(run);
            r.algorithm = alg;
            r.es_hat = sr.es_hat;
            r.es_true = es_true;
            r.correct = correct_selection(sr, theta, cfg.n_w);
            r.cost = sr.pricings;
            r.selected = sr.selected();
            std::sort(r.selected.begin(), r.selected.end());
            r.realized = sr.realized;
        }
    });
    res.records = std::move(slots);
    for (Algorithm a : cfg.algorithms) res.metrics.push_back(compute_metrics(res.records, a));
    return res;
}

// Fraction of paired bootstrap resamples (over runs) in which a has the
// smaller L1 error than b.
inline double bootstrap_l1_order(const std::vector<RunRecord>& recs, Algorithm a, Algorithm b, int resamples, Rng& rng)
{
    const auto ea = abs_errors(recs, a), eb = abs_errors(recs, b);
    require(!ea.empty() && ea.size() == eb.size(), "bootstrap: algorithms need the same runs");
    const std::size_t n = ea.size();
    int wins = 0;
    for (int t = 0; t < resamples; ++t) {
        double d = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t i = static_cast<std::size_t>(rng() % n);
            d += ea[i] - eb[i];
        }
        wins += d < 0.0 ? 1 : 0;
    }
    return static_cast<double>(wins) / resamples;
}

struct TailPoint {
    double x = 0.0;
    double prob = 0.0;
};

// Empirical x -> P[X > pivot - x] on a uniform grid over [0, x_max].
inline std::vector<TailPoint> tail_distribution(std::vector<double> errors, double pivot = 5000.0, int points = 501,
                                                double x_max = 5000.0)
{
    require(!errors.empty(), "tail_distribution: no records");
    require(points >= 2, "tail_distribution: need at least two grid points");
    std::sort(errors.begin(), errors.end());
    const double n = static_cast<double>(errors.size());
    std::vector<TailPoint> out(static_cast<std::size_t>(points));
    for (int t = 0; t < points; ++t) {
        const double x = x_max * t / (points - 1);
        const auto above = errors.end() - std::upper_bound(errors.begin(), errors.end(), pivot - x);
        out[t] = {x, static_cast<double>(above) / n};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Output

inline std::string fmt17(double v)
{
    if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// JSON text with every float printed to 17 significant digits.
inline void dump17(std::ostream& os, const nlohmann::json& j, int indent = 0)
{
    const std::string pad(static_cast<std::size_t>(indent + 2), ' '), end(static_cast<std::size_t>(indent), ' ');
    if (j.is_object()) {
        if (j.empty()) {
            os << "{}";
            return;
        }
        os << "{\n";
        bool first = true;
        for (auto it = j.begin(); it != j.end(); ++it) {
            os << (first ? "" : ",\n") << pad << nlohmann::json(it.key()).dump() << ": ";
            dump17(os, it.value(), indent + 2);
            first = false;
        }
        os << "\n" << end << "}";
    } else if (j.is_array()) {
        const bool flat = std::all_of(j.begin(), j.end(), [](const nlohmann::json& e) { return e.is_primitive(); });
        os << "[";
        for (std::size_t i = 0; i < j.size(); ++i) {
            os << (i ? (flat ? ", " : ",\n" + pad) : (flat ? "" : "\n" + pad));
            dump17(os, j[i], indent + 2);
        }
        os << (flat || j.empty() ? "]" : "\n" + end + "]");
    } else if (j.is_number_float()) {
        const double v = j.get<double>();
        os << (std::isfinite(v) ? fmt17(v) : "null");
    } else {
        os << j.dump();
    }
}

inline nlohmann::json strategy_json(const Strategy& s) { return {{"q", s.q}, {"N", s.n}, {"cost", cost(s)}}; }

inline nlohmann::json metrics_json(const ExperimentConfig& cfg, const ExperimentResult& r)
{
    nlohmann::json algs = nlohmann::json::array();
    for (const auto& m : r.metrics)
        algs.push_back({{"algorithm", algorithm_name(m.algorithm)},
                        {"runs", m.runs},
                        {"l1", m.l1},
                        {"l1_std", m.l1_std},
                        {"rel_pct", m.rel},
                        {"rel_std_pct", m.rel_std},
                        {"l2", m.l2},
                        {"correct", m.correct}});
    return {{"runs", cfg.runs},   {"seed", cfg.seed},         {"profile", cfg.profile},
            {"K", cfg.K},         {"rho_true", cfg.rho_true}, {"rho_train", cfg.rho_train},
            {"algorithms", algs}};
}

inline void write_text(const std::filesystem::path& p, const std::string& text)
{
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << text;
}

inline std::string runs_csv(const std::vector<RunRecord>& recs)
{
    std::ostringstream os;
    os << "run,algorithm,es_hat,es_true,error,rel_error,correct,cost,selected,strategy_q,strategy_N\n";
    auto join = [](const auto& v, Index shift) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i] + shift);
        return s;
    };
    for (const auto& r : recs)
        os << r.run + 1 << ',' << algorithm_name(r.algorithm) << ',' << fmt17(r.es_hat) << ',' << fmt17(r.es_true) << ','
           << fmt17(r.error()) << ',' << fmt17(r.error() / r.es_true) << ',' << (r.correct ? 1 : 0) << ',' << r.cost
           << ',' << join(r.selected, 1) << ',' << join(r.realized.q, 0) << ',' << join(r.realized.n, 0) << '\n';
    return os.str();
}

inline std::string tail_csv(const std::vector<RunRecord>& recs, const std::vector<Algorithm>& algs, double pivot,
                            int points, double x_max)
{
    std::vector<std::vector<TailPoint>> curves;
    for (Algorithm a : algs) curves.push_back(tail_distribution(abs_errors(recs, a), pivot, points, x_max));
    std::ostringstream os;
    os << "x";
    for (Algorithm a : algs) os << ',' << algorithm_name(a);
    os << '\n';
    for (int t = 0; t < points; ++t) {
        os << fmt17(curves.front()[t].x);
        for (const auto& c : curves) os << ',' << fmt17(c[t].prob);
        os << '\n';
    }
    return os.str();
}

// Realized strategies and how often each was used, per algorithm.
inline nlohmann::json strategies_json(const ExperimentResult& r, const std::vector<Algorithm>& algs)
{
    nlohmann::json j = nlohmann::json::object();
    for (Algorithm a : algs) {
        std::map<std::pair<std::vector<Count>, std::vector<Count>>, int> used;
        for (const auto& rec : r.records)
            if (rec.algorithm == a) ++used[{rec.realized.q, rec.realized.n}];
        std::vector<std::pair<int, Strategy>> ranked;
        for (const auto& [k, n] : used) ranked.push_back({n, Strategy{k.first, k.second}});
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
        nlohmann::json list = nlohmann::json::array();
        for (const auto& [n, s] : ranked) {
            auto e = strategy_json(s);
            e["runs"] = n;
            list.push_back(e);
        }
        j[algorithm_name(a)] = list;
    }
    return j;
}

inline void write_outputs(const ExperimentConfig& cfg, const ExperimentResult& r, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::ostringstream m, s;
    dump17(m, metrics_json(cfg, r));
    m << '\n';
    write_text(dir / "metrics.json", m.str());
    write_text(dir / "runs.csv", runs_csv(r.records));
    write_text(dir / "tail.csv", tail_csv(r.records, cfg.algorithms, cfg.tail_pivot, cfg.tail_points, cfg.tail_x_max));
    dump17(s, strategies_json(r, cfg.algorithms));
    s << '\n';
    write_text(dir / "strategies.json", s.str());
}

// Table with the column layout of the published comparison.
inline std::string metrics_table(const std::vector<AlgorithmMetrics>& ms)
{
    std::ostringstream os;
    os << "| Algorithm | L1 Err. | L1 Err. Std | Rel. Err. (%) | Rel. Err. Std (%) | L2 Err. | Correct Selections |\n";
    os << "|---|---|---|---|---|---|---|\n";
    char buf[256];
    for (const auto& m : ms) {
        std::snprintf(buf, sizeof buf, "| %s | %.0f | %.3g | %.3g | %.3g | %.0f | %d |\n", algorithm_name(m.algorithm), m.l1,
                      m.l1_std, m.rel, m.rel_std, m.l2, m.correct);
        os << buf;
    }
    return os.str();
}

// Reads runs.csv back into records (selected sets and strategies included).
inline std::vector<RunRecord> read_runs_csv(const std::filesystem::path& p)
{
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    std::string line;
    std::getline(is, line);
    std::vector<RunRecord> out;
    auto split_ints = [](const std::string& s) {
        std::vector<Count> v;
        std::istringstream ss(s);
        Count x;
        while (ss >> x) v.push_back(x);
        return v;
    };
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() < 11) throw std::runtime_error("malformed runs.csv line: " + line);
        RunRecord r;
        r.run = std::stoi(f[0]) - 1;
        r.algorithm = parse_algorithm(f[1]);
        r.es_hat = std::stod(f[2]);
        r.es_true = std::stod(f[3]);
        r.correct = f[6] == "1";
        r.cost = std::stoll(f[7]);
        for (Count i : split_ints(f[8])) r.selected.push_back(i - 1);
        r.realized.q = split_ints(f[9]);
        r.realized.n = split_ints(f[10]);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace esscreen
