// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "esscreen/bounds.hpp"
#include "esscreen/model.hpp"
#include "esscreen/parallel.hpp"
#include "esscreen/policy_net.hpp"
#include "esscreen/screener.hpp"

namespace esscreen {

// ---------------------------------------------------------------------------
// Normal-inverse-Wishart filtering

namespace detail {

inline IndexList identity_positions(Index n) { return iota_indexes(n); }

inline Vector take(const Vector& v, const IndexList& pos) { return restrict(v, pos); }

} // namespace detail

// `batch` is over p.index_map order; `keep` lists local positions to retain.
inline NIWParams niw_update(const NIWParams& p, const BatchMoments& batch, const IndexList& keep)
{
    const Index d = p.dim();
    const Count dn = batch.count;
    if (dn > 0) {
        require(batch.mean.size() == d && batch.scatter.rows() == d, "niw_update: batch dimension mismatch");
    }
    NIWParams out = p.restricted(keep);
    if (dn == 0) return out;
    const double k0 = p.k;
    const double n = static_cast<double>(dn);
    const Vector mu = detail::take(batch.mean, keep);
    const Vector diff = out.m - mu;
    out.m = (k0 * out.m + n * mu) / (k0 + n);
    out.S += restrict(batch.scatter, keep) + (k0 * n / (k0 + n)) * diff * diff.transpose();
    out.k = k0 + n;
    out.dof = p.dof + n;
    return out;
}

// Only the diagonal of S follows the update; correlations of p.S are kept.
inline NIWParams niw_update_diag(const NIWParams& p, const BatchMoments& batch, const IndexList& keep)
{
    const Index d = p.dim();
    const Count dn = batch.count;
    if (dn > 0) {
        require(batch.mean.size() == d && batch.scatter_diag.size() == d, "niw_update_diag: batch dimension mismatch");
    }
    NIWParams out = p.restricted(keep);
    if (dn == 0) return out;
    const double k0 = p.k;
    const double n = static_cast<double>(dn);
    const Vector mu = detail::take(batch.mean, keep);
    const Vector diff = out.m - mu;
    out.m = (k0 * out.m + n * mu) / (k0 + n);
    const Vector old_diag = out.S.diagonal();
    const Vector new_diag = old_diag + detail::take(batch.scatter_diag, keep) +
                            (k0 * n / (k0 + n)) * diff.array().square().matrix();
    const Index q = out.dim();
    for (Index c = 0; c < q; ++c)
        for (Index r = 0; r < q; ++r) {
            if (r == c) continue;
            const double den = std::sqrt(old_diag(r) * old_diag(c));
            const double corr = den > 0.0 ? out.S(r, c) / den : 0.0;
            out.S(r, c) = corr * std::sqrt(new_diag(r) * new_diag(c));
        }
    out.S.diagonal() = new_diag;
    out.k = k0 + n;
    out.dof = p.dof + n;
    return out;
}

// ---------------------------------------------------------------------------
// Strategy generation

struct StrategyGrid {
    std::vector<Count> q_grid;
    Count K = 0;
    int L = 2;
    Index n_s = 0;
    Index n_w = 0;
};

// Arc lengths of L+1 uniform points on a circle of length K, read from one
// of the points: one arc per level, the last level covering two arcs.
inline std::vector<double> circle_budgets(int L, double K, Rng& rng)
{
    std::vector<double> u(static_cast<std::size_t>(L + 1));
    for (auto& x : u) x = rng.uniform();
    const double start = u[static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(L + 1))];
    for (auto& x : u) x = x - start < 0.0 ? x - start + 1.0 : x - start;
    std::sort(u.begin(), u.end());  // u[0] == 0
    std::vector<double> out(static_cast<std::size_t>(L + 1), 0.0);  // out[l], l = 1..L
    for (int l = 1; l <= L - 1; ++l) out[l] = K * (u[l] - u[l - 1]);
    out[L] = K * (1.0 - u[L - 1]);
    return out;
}

inline std::vector<Strategy> generate_strategies(int k_bar, const StrategyGrid& g, Rng& rng)
{
    require(k_bar >= 1, "generate_strategies: k_bar must be >= 1");
    require(g.L >= 2, "generate_strategies: L must be >= 2");
    const auto& qg = g.q_grid;
    require(std::is_sorted(qg.begin(), qg.end()) && qg.front() == g.n_w && qg.back() == g.n_s,
            "generate_strategies: q_grid must run from n_w to n_s");
    require(static_cast<int>(qg.size()) >= g.L, "generate_strategies: q_grid too small for L levels");
    std::vector<Strategy> out;
    int rejected = 0;
    while (static_cast<int>(out.size()) < k_bar) {
        const auto budget = circle_budgets(g.L, static_cast<double>(g.K), rng);
        std::vector<int> qi(static_cast<std::size_t>(g.L));
        qi[0] = static_cast<int>(qg.size()) - 1;
        qi[g.L - 1] = 0;
        for (int l = 1; l <= g.L - 2; ++l) {
            const int lo = g.L - 1 - l;
            const int hi = qi[l - 1] - 1;
            qi[l] = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
        }
        Strategy s;
        s.n.push_back(0);
        for (int l = 0; l < g.L; ++l) s.q.push_back(qg[qi[l]]);
        bool ok = true;
        for (int l = 1; l <= g.L; ++l) {
            const Count dn = static_cast<Count>(std::floor(budget[l] / static_cast<double>(s.q[l - 1])));
            if (dn < 1) ok = false;
            s.n.push_back(s.n.back() + dn);
        }
        if (ok && s.check(g.n_s, g.n_w).empty() && cost(s) <= g.K) {
            out.push_back(std::move(s));
            rejected = 0;
        } else if (++rejected > 10000) {
            throw config_error("generate_strategies: more than 10^4 consecutive rejections");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Policy state and features

struct PosteriorState {
    int level = 0;
    Count q = 0;
    Count N = 0;
    Count C = 0;
    IndexList ids;
    Vector mu_hat;
    NIWParams post;

    Matrix sigma_estimate() const { return post.sigma_mean(); }
};

struct Action {
    Count next_q = 0;
    Count delta_n = 0;
    bool operator==(const Action&) const = default;
};

struct FeatureScales {
    double q = 6.0;
    double m = 1e6;
    double sigma = 1e12;
    double n = 1e4;
    double cost = 1e7;
    double f = 1e5;
};

inline std::vector<FeatureScales> default_feature_scales(int L)
{
    // Per decision level; the last two levels use the finer constants.
    std::vector<FeatureScales> out(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        if (l >= L - 2 && L >= 3) {
            out[l].cost = 1e5;
            out[l].f = 1e6;
        }
        if (l == L - 1 && L >= 3) out[l].sigma = 1e11;
    }
    return out;
}

constexpr Index action_feature_count = 3;

inline Index state_feature_count(Count q, Count full_matrix_max_q)
{
    const Index qq = static_cast<Index>(q);
    const Index sig = q <= full_matrix_max_q ? qq * (qq + 1) / 2 : qq + 1;
    return 5 + 2 * qq + sig;
}

inline Vector state_features(const PosteriorState& s, const FeatureScales& sc, Count full_matrix_max_q)
{
    const Index q = static_cast<Index>(s.ids.size());
    Vector x(state_feature_count(q, full_matrix_max_q));
    Index o = 0;
    x(o++) = static_cast<double>(s.q) / sc.q;
    x(o++) = static_cast<double>(s.N) / sc.n;
    x(o++) = static_cast<double>(s.C) / sc.cost;
    x(o++) = s.post.k / sc.n;
    x(o++) = s.post.dof / sc.n;
    const IndexList order = rank_select(iota_indexes(q), std::vector<double>(s.post.m.data(), s.post.m.data() + q), q);
    for (Index r = 0; r < q; ++r) x(o++) = s.mu_hat(order[r]) / sc.m;
    for (Index r = 0; r < q; ++r) x(o++) = s.post.m(order[r]) / sc.m;
    const Matrix sig = s.sigma_estimate();
    if (q <= full_matrix_max_q) {
        for (Index c = 0; c < q; ++c)
            for (Index r = 0; r <= c; ++r) x(o++) = sig(order[r], order[c]) / sc.sigma;
    } else {
        double corr = 0.0;
        for (Index r = 0; r < q; ++r) x(o++) = sig(order[r], order[r]) / sc.sigma;
        for (Index c = 0; c < q; ++c)
            for (Index r = 0; r < c; ++r) {
                const double den = std::sqrt(sig(r, r) * sig(c, c));
                corr += den > 0.0 ? sig(r, c) / den : 0.0;
            }
        x(o++) = q > 1 ? corr / (0.5 * static_cast<double>(q) * static_cast<double>(q - 1)) : 0.0;
    }
    return x;
}

inline Vector action_features(const PosteriorState& s, const Action& a, double f_plug, const FeatureScales& sc)
{
    Vector x(action_feature_count);
    x(0) = static_cast<double>(s.q - a.next_q) / sc.q;
    x(1) = static_cast<double>(a.delta_n) / sc.n;
    x(2) = f_plug / sc.f;
    return x;
}

// Selection bound for the action, evaluated before pricing with the current
// posterior mean and covariance estimate plugged in.
inline double f_plugin(const PosteriorState& s, const Matrix& sigma_est, const Action& a, Index n_w, const SubGammaParams& sub)
{
    if (a.next_q >= s.q || a.delta_n <= 0) return 0.0;
    AdaptiveLevelInput in;
    in.mu_tilde = &s.post.m;
    in.sigma_tilde = &sigma_est;
    in.mu_hat_prev = &s.mu_hat;
    in.ids = &s.ids;
    in.rank_by = &s.post.m;
    in.q_next = a.next_q;
    in.n_prev = s.N;
    in.delta_n = a.delta_n;
    in.n_w = n_w;
    return f_p_ad(in, sub);
}

// ---------------------------------------------------------------------------
// Forward pass

struct LevelRecord {
    PosteriorState state;
    Action action;
    double f_plug = 0.0;  // pre-decision plug-in bound of the action taken
    double f_pre = 0.0;   // plug-in bound after the batch
};

struct Trajectory {
    int k = 0;
    int j = 0;
    std::vector<LevelRecord> levels;  // decision levels 0..L-1
    NIWParams final_post;              // over J_{L-1}, after the last batch
    Vector final_mu_hat;
    double es_hat = 0.0;
    Count pricings = 0;
};

inline Action strategy_action(const Strategy& s, int level)
{
    const int L = s.levels();
    Action a;
    a.next_q = level + 1 <= L - 1 ? s.q[level + 1] : s.q[L - 1];
    a.delta_n = s.delta_n(level + 1);
    return a;
}

inline IndexList local_positions(const IndexList& ids, const IndexList& subset)
{
    std::map<Index, Index> pos;
    for (std::size_t r = 0; r < ids.size(); ++r) pos[ids[r]] = static_cast<Index>(r);
    IndexList out;
    out.reserve(subset.size());
    for (Index i : subset) out.push_back(pos.at(i));
    return out;
}

inline PosteriorState initial_state(const NIWParams& prior)
{
    PosteriorState s;
    s.level = 0;
    s.q = prior.dim();
    s.ids = prior.index_map;
    s.mu_hat = Vector::Zero(prior.dim());
    s.post = prior;
    return s;
}

inline double f_precompute(const LevelRecord& rec, const NIWParams& post_plus, Index n_w, const SubGammaParams& sub)
{
    if (rec.action.next_q >= rec.state.q) return 0.0;
    const Matrix sig = post_plus.sigma_mean();
    AdaptiveLevelInput in;
    in.mu_tilde = &post_plus.m;
    in.sigma_tilde = &sig;
    in.mu_hat_prev = &rec.state.mu_hat;
    in.ids = &rec.state.ids;
    in.rank_by = &rec.state.post.m;
    in.q_next = rec.action.next_q;
    in.n_prev = rec.state.N;
    in.delta_n = rec.action.delta_n;
    in.n_w = n_w;
    return f_p_ad(in, sub);
}

// Executes a fixed strategy while filtering the posterior.
inline Trajectory run_trajectory(const Strategy& s, const NIWParams& prior, Index n_w, PriceSource& source, Rng& rng,
                                 const SubGammaParams& sub)
{
    const int L = s.levels();
    s.validate(prior.dim(), n_w);
    Trajectory tr;
    ScreeningSession session(prior.dim(), source, rng, Scatter::diagonal);
    PosteriorState st = initial_state(prior);
    for (int l = 0; l < L; ++l) {
        LevelRecord rec;
        rec.state = st;
        rec.action = strategy_action(s, l);
        const Matrix sig = st.sigma_estimate();
        rec.f_plug = f_plugin(st, sig, rec.action, n_w, sub);
        if (l < L - 1) {
            const IndexList next = session.advance(rec.action.delta_n, rec.action.next_q);
            const NIWParams plus = niw_update_diag(st.post, session.last_batch(), detail::identity_positions(st.q));
            rec.f_pre = f_precompute(rec, plus, n_w, sub);
            const IndexList keep = local_positions(st.ids, next);
            PosteriorState nx;
            nx.level = l + 1;
            nx.q = rec.action.next_q;
            nx.N = st.N + rec.action.delta_n;
            nx.C = st.C + st.q * rec.action.delta_n;
            nx.ids = next;
            nx.mu_hat = session.estimates(next);
            nx.post = plus.restricted(keep);
            tr.levels.push_back(std::move(rec));
            st = std::move(nx);
        } else {
            const ScreeningRun run = session.finish(rec.action.delta_n);
            tr.final_post = niw_update_diag(st.post, session.last_batch(), detail::identity_positions(st.q));
            tr.final_mu_hat = session.estimates(st.ids);
            tr.es_hat = run.es_hat;
            tr.pricings = run.pricings;
            tr.levels.push_back(std::move(rec));
        }
    }
    return tr;
}

inline std::vector<Trajectory> forward_pass(const std::vector<Strategy>& strategies, const std::vector<ScenarioParams>& books,
                                            const NIWParams& prior, Index n_w, const SubGammaParams& sub,
                                            std::uint64_t seed, unsigned threads, Count chunk_rows = 100)
{
    const std::size_t kb = strategies.size(), jb = books.size();
    std::vector<Trajectory> out(kb * jb);
    parallel_for(kb * jb, threads, [&](std::size_t idx) {
        const int k = static_cast<int>(idx / jb), j = static_cast<int>(idx % jb);
        Rng rng = derive_stream(seed, {stream::training, 2, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(j)});
        GaussianPriceSource src(books[j], std::max<Count>(chunk_rows, 1) * books[j].size());
        Trajectory tr = run_trajectory(strategies[k], prior, n_w, src, rng, sub);
        tr.k = k;
        tr.j = j;
        out[idx] = std::move(tr);
    });
    return out;
}

// E|mean(mu_hat - mu~)| under the posterior; one inverse-Wishart draw is
// reused for n_p Gaussian draws.
inline double mc_value_final(const NIWParams& post, const Vector& mu_hat, Count n_e, Count n_p, Rng& rng)
{
    require(n_e >= 1 && n_p >= 1, "mc_value_final: draw counts must be positive");
    const Index d = post.dim();
    const double nw = static_cast<double>(d);
    const double centre = (mu_hat - post.m).sum() / nw;
    InverseWishart iw(post.effective_dof(), post.S);
    Vector u = Vector::Zero(d);
    double acc = 0.0;
    const double inv_sqrt_k = 1.0 / std::sqrt(post.k);
    for (Count e = 0; e < n_e; ++e) {
        if (e % n_p == 0) u = iw.sample_factor(rng).transpose() * Vector::Ones(d);
        double dot = 0.0;
        for (Index r = 0; r < d; ++r) dot += u(r) * rng.normal();
        acc += std::abs(centre - dot * inv_sqrt_k / nw);
    }
    return acc / static_cast<double>(n_e);
}

// ---------------------------------------------------------------------------
// Action sets

struct LevelCatalog {
    std::vector<Count> next_q;                   // observed q_{l+1} (decision levels l < L-1)
    std::vector<std::pair<Count, Count>> moves;  // observed (q_l - q_{l+1}, delta N_{l+1}), delta N on the quantum grid
    Count dn_min = 0;
    Count dn_max = 0;
    Count max_running_cost = 0;                  // max C_{l+1} in the strategy set
};

struct ActionCatalog {
    Index n_s = 0;
    Index n_w = 0;
    Count K = 0;
    int L = 0;
    std::vector<LevelCatalog> levels;

    Count min_future_cost(int level, Count q) const
    {
        if (level >= L) return 0;
        Count c = q * levels[level].dn_min;
        for (int l = level + 1; l < L; ++l) c += n_w * levels[l].dn_min;
        return c;
    }
};

inline Count snap_to_quantum(Count dn, Count quantum)
{
    quantum = std::max<Count>(quantum, 1);
    return std::max<Count>(quantum, (dn + quantum / 2) / quantum * quantum);
}

inline ActionCatalog build_catalog(const std::vector<Strategy>& strategies, Index n_s, Index n_w, Count K, Count quantum)
{
    require(!strategies.empty(), "build_catalog: no strategies");
    ActionCatalog cat;
    cat.n_s = n_s;
    cat.n_w = n_w;
    cat.K = K;
    cat.L = strategies.front().levels();
    cat.levels.resize(static_cast<std::size_t>(cat.L));
    for (int l = 0; l < cat.L; ++l) {
        auto& lc = cat.levels[l];
        std::set<Count> qs;
        std::set<std::pair<Count, Count>> moves;
        for (const auto& s : strategies) {
            require(s.levels() == cat.L, "build_catalog: strategies disagree on L");
            if (l < cat.L - 1) qs.insert(s.q[l + 1]);
            const Count drop = l < cat.L - 1 ? s.q[l] - s.q[l + 1] : 0;
            if (s.delta_n(l + 1) > 0) moves.insert({drop, snap_to_quantum(s.delta_n(l + 1), quantum)});
            Count c = 0;
            for (int t = 0; t <= l; ++t) c += s.q[t] * s.delta_n(t + 1);
            lc.max_running_cost = std::max(lc.max_running_cost, c);
        }
        require(!moves.empty(), "build_catalog: no strategy adds paths at a level");
        lc.next_q.assign(qs.begin(), qs.end());
        lc.moves.assign(moves.begin(), moves.end());
        lc.dn_min = std::numeric_limits<Count>::max();
        lc.dn_max = 0;
        for (const auto& [drop, dn] : lc.moves) {
            lc.dn_min = std::min(lc.dn_min, dn);
            lc.dn_max = std::max(lc.dn_max, dn);
        }
    }
    return cat;
}

inline std::vector<Action> action_set(const ActionCatalog& cat, const PosteriorState& s)
{
    const int l = s.level;
    require(l >= 0 && l < cat.L, "action_set: level out of range");
    const auto& lc = cat.levels[l];
    // Observed moves applied to the current q; when none lands on an observed
    // q_{l+1}, every observed q_{l+1} is paired with every observed delta N.
    std::vector<Action> cand;
    auto lands = [&](Count q) {
        return q >= cat.n_w && q <= s.q && std::binary_search(lc.next_q.begin(), lc.next_q.end(), q);
    };
    if (l < cat.L - 1) {
        for (const auto& [drop, dn] : lc.moves)
            if (lands(s.q - drop)) cand.push_back({s.q - drop, dn});
        if (cand.empty())
            for (Count q : lc.next_q)
                for (const auto& [drop, dn] : lc.moves)
                    if (lands(q)) cand.push_back({q, dn});
    } else {
        for (const auto& [drop, dn] : lc.moves) cand.push_back({s.q, dn});
        const Count rem = (cat.K - s.C) / std::max<Count>(s.q, 1);
        if (rem >= lc.dn_min && rem <= lc.dn_max) cand.push_back({s.q, rem});
    }
    std::sort(cand.begin(), cand.end(), [](const Action& a, const Action& b) {
        return a.next_q != b.next_q ? a.next_q < b.next_q : a.delta_n < b.delta_n;
    });
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    std::vector<Action> capped, relaxed;
    for (const Action& a : cand) {
        const Count c1 = s.C + s.q * a.delta_n;
        if (c1 + cat.min_future_cost(l + 1, a.next_q) > cat.K) continue;
        relaxed.push_back(a);
        if (l == cat.L - 1 || c1 <= lc.max_running_cost) capped.push_back(a);
    }
    return capped.empty() ? relaxed : capped;
}

inline bool action_feasible(const ActionCatalog& cat, const PosteriorState& s, const Action& a)
{
    const auto set = action_set(cat, s);
    return std::find(set.begin(), set.end(), a) != set.end();
}

// ---------------------------------------------------------------------------
// Value functions

struct AdaptiveConfig {
    Index n_s = 253;
    Index n_w = 6;
    Count K = 10000000;
    int L = 4;
    std::vector<Count> q_grid{6, 10, 15, 20, 25, 30, 35, 40, 45, 50, 60, 70, 80, 90, 100, 150, 200, 253};
    SubGammaParams sub{};
    int k_bar = 40;
    int j_bar = 10;
    Count n_e_final = 10000;
    Count n_p = 1000;
    Count n_e_nonfinal = 16;
    Count quantum = 0;              // 0: K / (100 n_s)
    Index hidden = 256;
    double r = 2.0;
    Count steps = 20000;
    Count probe_steps = 2000;
    int rate_candidates = 4;
    std::vector<double> base_rate{1e-1, 1e-1, 1e-1, 1e-1};
    Count batch_change = 1000;
    int j_batch_size = 4;
    int k_batch_size = 4;
    Count full_matrix_max_q = 25;
    Count chunk_rows = 100;
    std::vector<FeatureScales> scales;
    std::uint64_t seed = 7;
    unsigned threads = 1;
    std::string profile = "desk";

    Count effective_quantum() const { return quantum > 0 ? quantum : std::max<Count>(1, K / (100 * n_s)); }
    double rate_for(int level) const
    {
        if (base_rate.empty()) return 1e-1;
        return base_rate[std::min<std::size_t>(static_cast<std::size_t>(level), base_rate.size() - 1)];
    }
    std::vector<FeatureScales> scales_or_default() const { return scales.empty() ? default_feature_scales(L) : scales; }
};

struct PolicyBundle {
    static constexpr int version = 2;
    AdaptiveConfig cfg;
    NIWParams prior;
    ActionCatalog catalog;
    std::vector<FeatureScales> scales;
    std::vector<std::map<Count, PolicyNet>> nets;  // per decision level, per q

    const PolicyNet& net(int level, Count q) const
    {
        auto it = nets.at(static_cast<std::size_t>(level)).find(q);
        if (it == nets[level].end())
            throw std::runtime_error("policy bundle has no net for level " + std::to_string(level) + ", q=" + std::to_string(q));
        return it->second;
    }
};

struct Choice {
    Action action;
    double value = std::numeric_limits<double>::infinity();
};

// argmin over the action set of the level-l net; ties keep the first action.
inline Choice best_action(const PolicyBundle& b, const PosteriorState& s)
{
    const auto actions = action_set(b.catalog, s);
    if (actions.empty()) throw std::runtime_error("no feasible action at level " + std::to_string(s.level));
    const PolicyNet& net = b.net(s.level, s.q);
    const FeatureScales& sc = b.scales[s.level];
    const Vector xs = state_features(s, sc, b.cfg.full_matrix_max_q);
    const Vector zs = net.W1.rightCols(xs.size()) * xs;
    const Matrix sig = s.sigma_estimate();
    Choice best;
    Vector z(zs.size());
    for (const Action& a : actions) {
        const double fp = f_plugin(s, sig, a, b.cfg.n_w, b.cfg.sub);
        const Vector xa = action_features(s, a, fp, sc);
        z = zs + net.W1.leftCols(action_feature_count) * xa;
        const double v = net.raw_from_preactivation(z) * net.target_scale;
        if (v < best.value) best = {a, v};
    }
    return best;
}

inline Vector sample_features(const LevelRecord& rec, const FeatureScales& sc, Count full_matrix_max_q)
{
    const Vector xs = state_features(rec.state, sc, full_matrix_max_q);
    const Vector xa = action_features(rec.state, rec.action, rec.f_plug, sc);
    Vector x(xa.size() + xs.size());
    x << xa, xs;
    return x;
}

// Simulated successor of a decision-level state under a posterior draw,
// with the diagonal posterior update.
inline PosteriorState simulate_successor(const PosteriorState& s, const Action& a, const InverseWishart& iw, Rng& rng)
{
    const Index q = static_cast<Index>(s.ids.size());
    const Matrix F = iw.sample_factor(rng);
    Vector z(q), z2(q);
    for (Index r = 0; r < q; ++r) z(r) = rng.normal();
    for (Index r = 0; r < q; ++r) z2(r) = rng.normal();
    const Vector mu_t = s.post.m + F * z / std::sqrt(s.post.k);
    const double dn = static_cast<double>(a.delta_n);
    BatchMoments bm;
    bm.count = a.delta_n;
    bm.mean = mu_t + F * z2 / std::sqrt(dn);
    bm.scatter_diag.resize(q);
    const Vector var = F.rowwise().squaredNorm();
    for (Index r = 0; r < q; ++r)
        bm.scatter_diag(r) = a.delta_n > 1 ? var(r) * rng.chi_squared(dn - 1.0) : 0.0;
    const double n_new = static_cast<double>(s.N) + dn;
    Vector mh = (static_cast<double>(s.N) * s.mu_hat + dn * bm.mean) / n_new;
    const IndexList keep_local = rank_select(iota_indexes(q), std::vector<double>(mh.data(), mh.data() + q), a.next_q);
    PosteriorState nx;
    nx.level = s.level + 1;
    nx.q = a.next_q;
    nx.N = s.N + a.delta_n;
    nx.C = s.C + s.q * a.delta_n;
    for (Index r : keep_local) nx.ids.push_back(s.ids[r]);
    nx.mu_hat = restrict(mh, keep_local);
    nx.post = niw_update_diag(s.post, bm, keep_local);
    return nx;
}

struct FitReport {
    struct NetInfo {
        int level;
        Count q;
        Count samples;
        int winner;
        double final_rate;
        double first_loss;
        double last_loss;
    };
    std::vector<NetInfo> nets;
    std::vector<Strategy> strategies;
    std::vector<std::vector<double>> targets;  // per level, per (k, j)
};

inline PolicyBundle fit_value_functions(const AdaptiveConfig& cfg, const NIWParams& prior, FitReport* report = nullptr)
{
    require(prior.dim() == cfg.n_s, "fit_value_functions: prior dimension differs from n_s");
    const int L = cfg.L;
    PolicyBundle b;
    b.cfg = cfg;
    b.prior = prior;
    b.scales = cfg.scales_or_default();
    require(static_cast<int>(b.scales.size()) == L, "fit_value_functions: need one scale row per level");

    Rng gen = derive_stream(cfg.seed, {stream::training, 0});
    StrategyGrid sg{cfg.q_grid, cfg.K, L, cfg.n_s, cfg.n_w};
    const auto strategies = generate_strategies(cfg.k_bar, sg, gen);
    std::vector<ScenarioParams> books;
    for (int j = 0; j < cfg.j_bar; ++j) {
        Rng r = derive_stream(cfg.seed, {stream::training, 1, static_cast<std::uint64_t>(j)});
        books.push_back(sample_niw(prior, r));
    }
    const auto traj = forward_pass(strategies, books, prior, cfg.n_w, cfg.sub, cfg.seed, cfg.threads, cfg.chunk_rows);
    b.catalog = build_catalog(strategies, cfg.n_s, cfg.n_w, cfg.K, cfg.effective_quantum());
    b.nets.resize(static_cast<std::size_t>(L));
    if (report) {
        report->strategies = strategies;
        report->targets.assign(static_cast<std::size_t>(L), {});
    }

    for (int l = L - 1; l >= 0; --l) {
        std::vector<double> target(traj.size(), 0.0);
        parallel_for(traj.size(), cfg.threads, [&](std::size_t t) {
            Rng rng = derive_stream(cfg.seed, {stream::training, 3, static_cast<std::uint64_t>(l), t});
            const Trajectory& tr = traj[t];
            if (l == L - 1) {
                target[t] = mc_value_final(tr.final_post, tr.final_mu_hat, cfg.n_e_final, cfg.n_p, rng);
                return;
            }
            const LevelRecord& rec = tr.levels[l];
            InverseWishart iw(rec.state.post.effective_dof(), rec.state.post.S);
            double acc = 0.0;
            for (Count e = 0; e < cfg.n_e_nonfinal; ++e) {
                const PosteriorState nx = simulate_successor(rec.state, rec.action, iw, rng);
                acc += best_action(b, nx).value;
            }
            target[t] = acc / static_cast<double>(cfg.n_e_nonfinal) + rec.f_pre;
        });

        std::map<Count, std::vector<std::size_t>> by_q;
        for (std::size_t t = 0; t < traj.size(); ++t) by_q[traj[t].levels[l].state.q].push_back(t);
        std::vector<std::pair<Count, std::vector<std::size_t>>> groups(by_q.begin(), by_q.end());
        std::vector<PolicyNet> trained(groups.size());
        std::vector<FitReport::NetInfo> infos(groups.size());
        parallel_for(groups.size(), cfg.threads, [&](std::size_t g) {
            const auto& [q, members] = groups[g];
            TrainingSet ts;
            const Index d = action_feature_count + state_feature_count(q, cfg.full_matrix_max_q);
            ts.X.resize(d, static_cast<Index>(members.size()));
            ts.y.resize(static_cast<Index>(members.size()));
            for (std::size_t c = 0; c < members.size(); ++c) {
                const Trajectory& tr = traj[members[c]];
                ts.X.col(static_cast<Index>(c)) = sample_features(tr.levels[l], b.scales[l], cfg.full_matrix_max_q);
                ts.y(static_cast<Index>(c)) = target[members[c]];
                ts.k_of.push_back(tr.k);
                ts.j_of.push_back(tr.j);
            }
            TrainSchedule sc;
            sc.steps = cfg.steps;
            sc.r = cfg.r;
            sc.batch_change = cfg.batch_change;
            sc.j_batch_size = cfg.j_batch_size;
            sc.k_batch_size = cfg.k_batch_size;
            const std::uint64_t seed = derive_stream(cfg.seed, {stream::training, 4, static_cast<std::uint64_t>(l),
                                                                static_cast<std::uint64_t>(q)})();
            RateSearchResult res = learning_rate_search(cfg.rate_candidates, cfg.rate_for(l), cfg.probe_steps, ts, sc,
                                                        cfg.hidden, seed);
            infos[g] = {l, q, static_cast<Count>(members.size()), res.winner, res.final_rate,
                        res.final_trace.loss.empty() ? 0.0 : res.final_trace.loss.front(),
                        res.final_trace.loss.empty() ? 0.0 : res.final_trace.loss.back()};
            trained[g] = std::move(res.net);
        });
        for (std::size_t g = 0; g < groups.size(); ++g) b.nets[l][groups[g].first] = std::move(trained[g]);
        if (report) {
            report->nets.insert(report->nets.end(), infos.begin(), infos.end());
            report->targets[l] = target;
        }
    }
    return b;
}

struct AdaptiveRun {
    ScreeningRun run;
    std::vector<PosteriorState> trace;
    std::vector<Action> actions;
};

inline AdaptiveRun run_adaptive(const PolicyBundle& b, PriceSource& source, Rng& rng)
{
    const int L = b.cfg.L;
    require(source.dimension() == b.cfg.n_s, "run_adaptive: source dimension differs from the policy");
    AdaptiveRun out;
    ScreeningSession session(b.cfg.n_s, source, rng, Scatter::diagonal);
    PosteriorState st = initial_state(b.prior);
    for (int l = 0; l < L; ++l) {
        const Choice ch = best_action(b, st);
        const Action a = ch.action;
        if (!action_feasible(b.catalog, st, a) || st.C + st.q * a.delta_n > b.cfg.K)
            throw std::logic_error("run_adaptive: policy produced an infeasible action");
        out.trace.push_back(st);
        out.actions.push_back(a);
        if (l < L - 1) {
            const IndexList next = session.advance(a.delta_n, a.next_q);
            const IndexList keep = local_positions(st.ids, next);
            PosteriorState nx;
            nx.level = l + 1;
            nx.q = a.next_q;
            nx.N = st.N + a.delta_n;
            nx.C = st.C + st.q * a.delta_n;
            nx.ids = next;
            nx.mu_hat = session.estimates(next);
            nx.post = niw_update_diag(st.post, session.last_batch(), keep);
            st = std::move(nx);
        } else {
            out.run = session.finish(a.delta_n);
        }
    }
    if (out.run.pricings > b.cfg.K) throw std::logic_error("run_adaptive: budget exceeded");
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline nlohmann::json blob(const double* p, std::size_t n)
{
    std::vector<std::uint8_t> bytes(n * sizeof(double));
    std::memcpy(bytes.data(), p, bytes.size());
    return nlohmann::json::binary(std::move(bytes));
}

inline void unblob(const nlohmann::json& j, double* p, std::size_t n)
{
    const auto& bytes = j.get_binary();
    if (bytes.size() != n * sizeof(double)) throw std::runtime_error("policy bundle: weight block size mismatch");
    std::memcpy(p, bytes.data(), bytes.size());
}

} // namespace detail

inline void save_bundle(const PolicyBundle& b, const std::string& path)
{
    using nlohmann::json;
    json j;
    j["format"] = "esscreen-policy";
    j["version"] = PolicyBundle::version;
    const auto& c = b.cfg;
    j["header"] = {{"n_s", c.n_s}, {"n_w", c.n_w}, {"K", c.K}, {"L", c.L}, {"q_grid", c.q_grid},
                   {"profile", c.profile}, {"seed", c.seed}, {"p", c.sub.p}, {"c", c.sub.c},
                   {"full_matrix_max_q", c.full_matrix_max_q}, {"hidden", c.hidden}};
    json sc = json::array();
    for (const auto& s : b.scales) sc.push_back({s.q, s.m, s.sigma, s.n, s.cost, s.f});
    j["scales"] = sc;
    j["prior"] = {{"k", b.prior.k}, {"dof", b.prior.dof}, {"dim", b.prior.dim()},
                  {"m", detail::blob(b.prior.m.data(), static_cast<std::size_t>(b.prior.m.size()))},
                  {"S", detail::blob(b.prior.S.data(), static_cast<std::size_t>(b.prior.S.size()))}};
    json cat = json::array();
    for (const auto& lc : b.catalog.levels)
        cat.push_back({{"next_q", lc.next_q}, {"moves", lc.moves}, {"dn_min", lc.dn_min}, {"dn_max", lc.dn_max},
                       {"max_running_cost", lc.max_running_cost}});
    j["catalog"] = cat;
    json nets = json::array();
    for (std::size_t l = 0; l < b.nets.size(); ++l)
        for (const auto& [q, net] : b.nets[l])
            nets.push_back({{"level", l}, {"q", q}, {"d", net.inputs()}, {"hidden", net.hidden()},
                            {"target_scale", net.target_scale}, {"b2", net.b2},
                            {"W1", detail::blob(net.W1.data(), static_cast<std::size_t>(net.W1.size()))},
                            {"b1", detail::blob(net.b1.data(), static_cast<std::size_t>(net.b1.size()))},
                            {"w2", detail::blob(net.w2.data(), static_cast<std::size_t>(net.w2.size()))}});
    j["nets"] = nets;
    const auto bytes = json::to_cbor(j);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write policy bundle: " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline PolicyBundle load_bundle(const std::string& path, const AdaptiveConfig& base = {})
{
    using nlohmann::json;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("policy artifact not found: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const json j = json::from_cbor(bytes);
    if (j.value("format", "") != "esscreen-policy" || j.value("version", 0) != PolicyBundle::version)
        throw std::runtime_error("unsupported policy bundle: " + path);
    PolicyBundle b;
    b.cfg = base;
    const auto& h = j["header"];
    b.cfg.n_s = h["n_s"];
    b.cfg.n_w = h["n_w"];
    b.cfg.K = h["K"];
    b.cfg.L = h["L"];
    b.cfg.q_grid = h["q_grid"].get<std::vector<Count>>();
    b.cfg.profile = h["profile"];
    b.cfg.seed = h["seed"];
    b.cfg.sub.p = h["p"];
    b.cfg.sub.c = h["c"];
    b.cfg.full_matrix_max_q = h["full_matrix_max_q"];
    b.cfg.hidden = h["hidden"];
    for (const auto& s : j["scales"]) b.scales.push_back({s[0], s[1], s[2], s[3], s[4], s[5]});
    const Index d = j["prior"]["dim"];
    b.prior.k = j["prior"]["k"];
    b.prior.dof = j["prior"]["dof"];
    b.prior.m.resize(d);
    b.prior.S.resize(d, d);
    detail::unblob(j["prior"]["m"], b.prior.m.data(), static_cast<std::size_t>(d));
    detail::unblob(j["prior"]["S"], b.prior.S.data(), static_cast<std::size_t>(d * d));
    b.prior.index_map = iota_indexes(d);
    b.catalog.n_s = b.cfg.n_s;
    b.catalog.n_w = b.cfg.n_w;
    b.catalog.K = b.cfg.K;
    b.catalog.L = b.cfg.L;
    for (const auto& lc : j["catalog"]) {
        LevelCatalog c;
        c.next_q = lc["next_q"].get<std::vector<Count>>();
        c.moves = lc["moves"].get<std::vector<std::pair<Count, Count>>>();
        c.dn_min = lc["dn_min"];
        c.dn_max = lc["dn_max"];
        c.max_running_cost = lc["max_running_cost"];
        b.catalog.levels.push_back(std::move(c));
    }
    b.nets.resize(static_cast<std::size_t>(b.cfg.L));
    for (const auto& n : j["nets"]) {
        PolicyNet net(n["d"].get<Index>(), n["hidden"].get<Index>());
        net.target_scale = n["target_scale"];
        net.b2 = n["b2"];
        detail::unblob(n["W1"], net.W1.data(), static_cast<std::size_t>(net.W1.size()));
        detail::unblob(n["b1"], net.b1.data(), static_cast<std::size_t>(net.b1.size()));
        detail::unblob(n["w2"], net.w2.data(), static_cast<std::size_t>(net.w2.size()));
        b.nets[n["level"].get<std::size_t>()][n["q"].get<Count>()] = std::move(net);
    }
    return b;
}

} // namespace esscreen
