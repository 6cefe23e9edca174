// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "esscreen/bounds.hpp"
#include "esscreen/screener.hpp"

namespace esscreen {

struct PlanningGrid {
    std::vector<Count> q_grid;
    std::vector<Count> n_grid;
    Count K = 0;
    int L = 2;
    Index n_s = 0;
    Index n_w = 0;

    void validate() const
    {
        require(L >= 1, "planning grid: L must be >= 1");
        require(std::is_sorted(q_grid.begin(), q_grid.end()) &&
                    std::adjacent_find(q_grid.begin(), q_grid.end()) == q_grid.end(),
                "planning grid: q_grid must be strictly increasing");
        require(std::is_sorted(n_grid.begin(), n_grid.end()) &&
                    std::adjacent_find(n_grid.begin(), n_grid.end()) == n_grid.end(),
                "planning grid: n_grid must be strictly increasing");
        require(std::find(q_grid.begin(), q_grid.end(), n_s) != q_grid.end(), "planning grid: n_s missing from q_grid");
        require(std::find(q_grid.begin(), q_grid.end(), n_w) != q_grid.end(), "planning grid: n_w missing from q_grid");
        require(!n_grid.empty() && n_grid.front() >= 0, "planning grid: n_grid must be non-empty and non-negative");
    }
};

struct Plan {
    Strategy strategy;
    double F_value = std::numeric_limits<double>::infinity();
    Count cost = 0;
};

// Total order used to break ties between plans of equal bound value.
inline bool plan_before(double va, Count ca, const Strategy& a, double vb, Count cb, const Strategy& b)
{
    if (va != vb) return va < vb;
    if (ca != cb) return ca < cb;
    if (a.q != b.q) return a.q < b.q;
    return a.n < b.n;
}

namespace detail {

class DpSolver {
public:
    DpSolver(const PlanningGrid& g, const BoundObjective& obj) : g_(g), obj_(obj)
    {
        const std::size_t m = g.n_grid.size();
        // terminal prefix minima: for each N_{L-1} index, over N_L >= N_{L-1}
        term_best_.resize(m);
        for (std::size_t a = 0; a < m; ++a) {
            auto& row = term_best_[a];
            double bv = std::numeric_limits<double>::infinity();
            std::size_t bi = a;
            for (std::size_t b = a; b < m; ++b) {
                const double v = obj.terminal(g.n_grid[a], g.n_grid[b]);
                // equal value: the smaller N_L is cheaper, keep the earlier one
                if (v < bv) {
                    bv = v;
                    bi = b;
                }
                row.push_back({bv, bi});
            }
        }
    }

    struct Suffix {
        double value = std::numeric_limits<double>::infinity();
        Count cost = 0;
        std::vector<Count> q;  // q_l .. q_{L-1}
        std::vector<Count> n;  // N_l .. N_L
        bool feasible = false;
    };

    // Best completion from level l given q_{l-1}, N_{l-1} (grid index or -1 for 0) and spent cost.
    const Suffix& solve(int l, Count q_prev, int n_prev_idx, Count spent)
    {
        const Key key{l, q_prev, n_prev_idx, spent};
        auto it = memo_.find(key);
        if (it != memo_.end()) return it->second;
        Suffix best;
        const Count n_prev = n_prev_idx < 0 ? 0 : g_.n_grid[static_cast<std::size_t>(n_prev_idx)];
        const std::size_t first = n_prev_idx < 0 ? 0 : static_cast<std::size_t>(n_prev_idx);
        if (l == g_.L) {
            best = terminal(q_prev, n_prev_idx, n_prev, spent);
        } else {
            for (Count q : g_.q_grid) {
                if (q > q_prev || q < g_.n_w) continue;
                if (l == g_.L - 1 && q != g_.n_w) continue;
                for (std::size_t b = first; b < g_.n_grid.size(); ++b) {
                    const Count n = g_.n_grid[b];
                    if (n < n_prev) continue;
                    const Count c = spent + q_prev * (n - n_prev);
                    if (c > g_.K) break;
                    const Suffix& rest = solve(l + 1, q, static_cast<int>(b), c);
                    if (!rest.feasible) continue;
                    const double v = obj_.selection(q_prev, q, n) + rest.value;
                    const Count total = (c - spent) + rest.cost;
                    Suffix cand;
                    cand.value = v;
                    cand.cost = total;
                    cand.feasible = true;
                    if (best.feasible && !better(cand, q, n, rest, best)) continue;
                    cand.q.reserve(rest.q.size() + 1);
                    cand.q.push_back(q);
                    cand.q.insert(cand.q.end(), rest.q.begin(), rest.q.end());
                    cand.n.push_back(n);
                    cand.n.insert(cand.n.end(), rest.n.begin(), rest.n.end());
                    best = std::move(cand);
                }
            }
        }
        return memo_.emplace(key, std::move(best)).first->second;
    }

private:
    struct Key {
        int l;
        Count q;
        int n;
        Count spent;
        bool operator==(const Key&) const = default;
    };
    struct KeyHash {
        std::size_t operator()(const Key& k) const
        {
            std::uint64_t h = static_cast<std::uint64_t>(k.spent);
            h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint64_t>(k.q);
            h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint64_t>(k.n + 1);
            h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint64_t>(k.l);
            return static_cast<std::size_t>(h ^ (h >> 29));
        }
    };

    static bool better(const Suffix& cand, Count q, Count n, const Suffix& rest, const Suffix& best)
    {
        if (cand.value != best.value) return cand.value < best.value;
        if (cand.cost != best.cost) return cand.cost < best.cost;
        std::vector<Count> cq{q};
        cq.insert(cq.end(), rest.q.begin(), rest.q.end());
        if (cq != best.q) return cq < best.q;
        std::vector<Count> cn{n};
        cn.insert(cn.end(), rest.n.begin(), rest.n.end());
        return cn < best.n;
    }

    Suffix terminal(Count q_last, int n_prev_idx, Count n_prev, Count spent) const
    {
        Suffix s;
        if (n_prev_idx < 0) return s;
        const Count budget = g_.K - spent;
        if (budget < 0) return s;
        const Count max_n = n_prev + budget / std::max<Count>(q_last, 1);
        const auto& grid = g_.n_grid;
        const std::size_t a = static_cast<std::size_t>(n_prev_idx);
        const std::size_t end = static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), max_n) - grid.begin());
        if (end <= a) return s;
        const auto& entry = term_best_[a][end - 1 - a];
        s.value = entry.first;
        s.cost = q_last * (grid[entry.second] - n_prev);
        s.n = {grid[entry.second]};
        s.feasible = true;
        return s;
    }

    const PlanningGrid& g_;
    const BoundObjective& obj_;
    std::vector<std::vector<std::pair<double, std::size_t>>> term_best_;
    std::unordered_map<Key, Suffix, KeyHash> memo_;
};

} // namespace detail

inline Plan dp_optimize(const PlanningGrid& grid, const BoundObjective& obj)
{
    grid.validate();
    require(obj.n_s() == grid.n_s && obj.n_w() == grid.n_w, "dp_optimize: objective and grid disagree on n_s/n_w");
    detail::DpSolver solver(grid, obj);
    Plan plan;
    if (grid.L == 1) {
        if (grid.n_s != grid.n_w) throw infeasible_error("dp_optimize: L=1 requires n_s == n_w");
    }
    const auto& best = solver.solve(1, grid.n_s, -1, 0);
    if (!best.feasible || !std::isfinite(best.value))
        throw infeasible_error("dp_optimize: no grid strategy with finite bound fits the budget");
    plan.strategy.q = {grid.n_s};
    plan.strategy.q.insert(plan.strategy.q.end(), best.q.begin(), best.q.end());
    plan.strategy.n = {0};
    plan.strategy.n.insert(plan.strategy.n.end(), best.n.begin(), best.n.end());
    plan.F_value = best.value;
    plan.cost = cost(plan.strategy);
    return plan;
}

inline Plan dp_optimize(const PlanningGrid& grid, const ScenarioParams& theta, const SubGammaParams& sub)
{
    return dp_optimize(grid, DeterministicObjective(theta, grid.n_w, sub));
}

inline Plan dp_optimize(const PlanningGrid& grid, const RobustBounds& rb, const SubGammaParams& sub)
{
    return dp_optimize(grid, RobustObjective(rb, grid.n_s, grid.n_w, sub));
}

struct HeuristicParams {
    double delta0 = 0.0;
    double sigma_bar = 0.0;
    double c = 0.0;
    Count K = 0;
    Count N2 = 0;
    Index n_s = 0;
    Index n_w = 0;
    double p = 1.0;

    void validate() const
    {
        require(delta0 > 0.0, "heuristic: delta0 must be > 0");
        require(N2 > 0 && n_w >= 1 && n_s > n_w, "heuristic: invalid sizes");
        if (N2 * n_w > K) throw infeasible_error("heuristic: N2 * n_w exceeds the budget");
    }

    double q1_max() const { return static_cast<double>(std::min<Count>(n_s - 1, K / N2)); }
};

inline double heuristic_objective(double q1, const HeuristicParams& hp)
{
    const double ns = static_cast<double>(hp.n_s);
    const double gap = (q1 + 1.0 - static_cast<double>(hp.n_w)) * hp.delta0;
    const double budget = static_cast<double>(hp.K) - q1 * static_cast<double>(hp.N2);
    const double denom = 2.0 * hp.p * (ns - q1) * (hp.sigma_bar * hp.sigma_bar + hp.c * gap);
    const double expo = denom > 0.0 ? -budget * gap * gap / denom : -std::numeric_limits<double>::infinity();
    return std::pow(ns - q1, 1.0 / hp.p) * gap * detail::safe_exp(expo);
}

inline Count heuristic_first_level_paths(Count q1, const HeuristicParams& hp)
{
    return (hp.K - q1 * hp.N2) / (hp.n_s - q1);
}

struct HeuristicChoice {
    Count q1 = 0;
    Count N1 = 0;
    double value = 0.0;

    Strategy strategy(const HeuristicParams& hp) const
    {
        return Strategy::from_lists({hp.n_s, q1, hp.n_w}, {0, N1, hp.N2});
    }
};

inline HeuristicChoice heuristic_numeric(const HeuristicParams& hp)
{
    hp.validate();
    HeuristicChoice best;
    best.value = std::numeric_limits<double>::infinity();
    const Count hi = static_cast<Count>(hp.q1_max());
    for (Count q1 = hp.n_w; q1 <= hi; ++q1) {
        const double v = heuristic_objective(static_cast<double>(q1), hp);
        if (v < best.value) {
            best.value = v;
            best.q1 = q1;
        }
    }
    best.N1 = heuristic_first_level_paths(best.q1, hp);
    return best;
}

struct ClosedFormResult {
    double delta = 0.0;
    double B = 0.0;
    double q1_2 = 0.0;
    double q1_11 = 0.0;
    double q1_12 = 0.0;
    int table_row = 0;
    std::vector<double> candidates;
    double q1_real = 0.0;
    Count q1 = 0;
};

inline ClosedFormResult heuristic_closed_form(const HeuristicParams& hp)
{
    if (hp.p != 1.0) throw invalid_parameter("heuristic_closed_form: only p = 1 is supported");
    hp.validate();
    const double K = static_cast<double>(hp.K);
    const double N2 = static_cast<double>(hp.N2);
    const double ns = static_cast<double>(hp.n_s);
    const double nw = static_cast<double>(hp.n_w);
    ClosedFormResult r;
    r.delta = std::pow(K - (nw - 1.0) * N2, 2) - 32.0 * ns * N2 * hp.c / hp.delta0;
    r.B = hp.c == 0.0 ? std::numeric_limits<double>::infinity()
                      : hp.sigma_bar * hp.sigma_bar / (hp.c * hp.delta0) + nw - 1.0;
    const double sd = std::sqrt(std::max(r.delta, 0.0));
    r.q1_2 = std::max((nw - 1.0) / 3.0 + 2.0 * K / (3.0 * N2), nw);
    r.q1_11 = std::max(3.0 * (nw - 1.0) / 4.0 + (K - sd) / (4.0 * N2), nw);
    r.q1_12 = std::max(3.0 * (nw - 1.0) / 4.0 + (K + sd) / (4.0 * N2), nw);

    const double B = r.B;
    const bool dpos = r.delta > 0.0;
    if (B >= ns) {
        r.table_row = 1, r.candidates = {r.q1_2};
    } else if (B <= nw && dpos) {
        r.table_row = 2, r.candidates = {nw, r.q1_12};
    } else if (B <= nw) {
        r.table_row = 3, r.candidates = {nw};
    } else if (dpos) {
        if (r.q1_2 <= B) {
            if (r.q1_11 <= B && r.q1_12 <= B)
                r.table_row = 4, r.candidates = {r.q1_2, B};
            else if (r.q1_11 <= B)
                r.table_row = 5, r.candidates = {r.q1_2, r.q1_12};
            else
                r.table_row = 6, r.candidates = {r.q1_2, B, r.q1_12};
        } else {
            if (r.q1_12 <= B)
                r.table_row = 7, r.candidates = {B};
            else
                r.table_row = 8, r.candidates = {B, r.q1_12};
        }
    } else {
        if (r.q1_2 <= B)
            r.table_row = 9, r.candidates = {r.q1_2, B};
        else
            r.table_row = 10, r.candidates = {B};
    }

    double best = std::numeric_limits<double>::infinity();
    for (double c : r.candidates) {
        const double v = heuristic_objective(c, hp);
        if (v < best || (v == best && c < r.q1_real)) {
            best = v;
            r.q1_real = c;
        }
    }
    const double clamped = std::clamp(r.q1_real, nw, hp.q1_max());
    r.q1 = static_cast<Count>(std::llround(clamped));
    return r;
}

inline nlohmann::json plan_to_json(const Plan& p)
{
    return {{"q", p.strategy.q}, {"N", p.strategy.n}, {"F_value", p.F_value}, {"cost", p.cost}};
}

inline Plan plan_from_json(const nlohmann::json& j)
{
    Plan p;
    p.strategy = Strategy::from_lists(j.at("q").get<std::vector<Count>>(), j.at("N").get<std::vector<Count>>());
    if (j.contains("F_value") && j["F_value"].is_number()) p.F_value = j["F_value"].get<double>();
    p.cost = cost(p.strategy);
    return p;
}

} // namespace esscreen
