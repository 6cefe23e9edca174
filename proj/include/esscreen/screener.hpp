// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "esscreen/model.hpp"

namespace esscreen {

// Screening schedule. q holds L thresholds (q[0] = n_s, q[L-1] = n_w),
// n holds L+1 cumulative path counts (n[0] = 0).
struct Strategy {
    std::vector<Count> q;
    std::vector<Count> n;

    int levels() const { return static_cast<int>(q.size()); }
    Count delta_q(int l) const { return q[l - 1] - q[l]; }
    Count delta_n(int l) const { return n[l] - n[l - 1]; }

    // Accepts either the canonical form or a q list carrying a trailing
    // n_w for level L (same length as n), in which case delta N_L = 0.
    static Strategy from_lists(std::vector<Count> q, std::vector<Count> n)
    {
        Strategy s;
        if (!n.empty() && q.size() == n.size()) n.push_back(n.back());
        s.q = std::move(q);
        s.n = std::move(n);
        return s;
    }

    std::string check(Index n_s, Index n_w) const
    {
        if (q.empty()) return "strategy has no levels";
        if (n.size() != q.size() + 1) return "strategy needs one more N than q";
        if (q.front() != n_s) return "q_0 must equal n_s";
        if (q.back() != n_w) return "q_{L-1} must equal n_w";
        for (std::size_t l = 1; l < q.size(); ++l)
            if (q[l] > q[l - 1]) return "q must be non-increasing";
        if (n.front() != 0) return "N_0 must be 0";
        for (std::size_t l = 1; l < n.size(); ++l)
            if (n[l] < n[l - 1]) return "N must be non-decreasing";
        return {};
    }

    void validate(Index n_s, Index n_w) const
    {
        const std::string why = check(n_s, n_w);
        if (!why.empty()) throw invalid_parameter("invalid strategy: " + why);
    }

    std::string str() const
    {
        std::ostringstream os;
        os << "q=(";
        for (std::size_t l = 0; l < q.size(); ++l) os << (l ? "," : "") << q[l];
        os << ") N=(";
        for (std::size_t l = 0; l < n.size(); ++l) os << (l ? "," : "") << n[l];
        os << ")";
        return os.str();
    }

    bool operator==(const Strategy&) const = default;
};

inline Count cost(const Strategy& s)
{
    Count c = 0;
    for (int l = 0; l < s.levels(); ++l) c += s.q[l] * (s.n[l + 1] - s.n[l]);
    return c;
}

inline Strategy uniform_strategy(Index n_s, Index n_w, Count K)
{
    const Count n1 = K / n_s;
    return Strategy::from_lists({n_s, n_w}, {0, n1});
}

// Keeps the `keep` largest values; order (-value, index).
inline IndexList rank_select(const IndexList& idx, const std::vector<double>& values, Count keep)
{
    if (keep < 0 || keep > static_cast<Count>(idx.size()))
        throw std::invalid_argument("rank_select: keep exceeds the index set");
    std::vector<std::size_t> pos(idx.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return idx[a] < idx[b];
    };
    std::partial_sort(pos.begin(), pos.begin() + keep, pos.end(), before);
    IndexList out(static_cast<std::size_t>(keep));
    for (Count r = 0; r < keep; ++r) out[r] = idx[pos[r]];
    return out;
}

inline IndexList rank_select(const Vector& values, Count keep)
{
    return rank_select(iota_indexes(values.size()),
                       std::vector<double>(values.data(), values.data() + values.size()), keep);
}

inline double exact_es(const ScenarioParams& theta, Index n_w)
{
    require(n_w >= 1 && n_w <= theta.size(), "exact_es: n_w out of range");
    std::vector<double> v(theta.mu.data(), theta.mu.data() + theta.size());
    std::nth_element(v.begin(), v.begin() + (n_w - 1), v.end(), std::greater<>());
    double s = 0.0;
    for (Index r = 0; r < n_w; ++r) s += v[r];
    return s / static_cast<double>(n_w);
}

struct ScreeningRun {
    Vector sums;                        // compensated: sums + sums_lo
    Vector sums_lo;
    std::vector<Count> counts;
    std::vector<IndexList> survivors;   // survivors[l] = J_l, l = 0..L-1
    std::vector<Vector> level_estimates; // level_estimates[l-1] = mu_hat_l (NaN outside J_{l-1})
    Strategy realized;
    double es_hat = 0.0;
    Count pricings = 0;

    const IndexList& selected() const { return survivors.back(); }
};

inline bool correct_selection(const ScreeningRun& run, const ScenarioParams& theta, Index n_w)
{
    IndexList truth = rank_select(theta.mu, n_w);
    IndexList got = run.selected();
    std::sort(truth.begin(), truth.end());
    std::sort(got.begin(), got.end());
    return truth == got;
}

// Step-by-step screening used by both fixed strategies and adaptive runs.
class ScreeningSession {
public:
    ScreeningSession(Index n_s, PriceSource& source, Rng& rng, Scatter scatter = Scatter::none)
        : source_(source), rng_(rng), scatter_(scatter)
    {
        require(source.dimension() == n_s, "screening: source dimension differs from n_s");
        run_.sums = Vector::Zero(n_s);
        run_.sums_lo = Vector::Zero(n_s);
        run_.counts.assign(static_cast<std::size_t>(n_s), 0);
        run_.survivors.push_back(iota_indexes(n_s));
        run_.realized.q.push_back(n_s);
        run_.realized.n.push_back(0);
    }

    const IndexList& current() const { return run_.survivors.back(); }
    Count paths() const { return run_.realized.n.back(); }
    const BatchMoments& last_batch() const { return last_; }
    int level() const { return static_cast<int>(run_.realized.n.size()) - 1; }

    double estimate(Index i) const
    {
        const Count n = run_.counts[i];
        return n == 0 ? 0.0 : (run_.sums(i) + run_.sums_lo(i)) / static_cast<double>(n);
    }

    Vector estimates(const IndexList& idx) const
    {
        Vector v(static_cast<Index>(idx.size()));
        for (std::size_t r = 0; r < idx.size(); ++r) v(static_cast<Index>(r)) = estimate(idx[r]);
        return v;
    }

    // Prices delta_n new paths for the current survivors, then keeps `keep`.
    const IndexList& advance(Count delta_n, Count keep)
    {
        require(delta_n >= 0, "screening: negative path increment");
        const IndexList& cur = current();
        last_ = source_.draw(cur, delta_n, rng_, scatter_);
        const Index n_s = run_.sums.size();
        Vector est = Vector::Constant(n_s, std::numeric_limits<double>::quiet_NaN());
        std::vector<double> vals(cur.size());
        for (std::size_t r = 0; r < cur.size(); ++r) {
            const Index i = cur[r];
            if (delta_n > 0) {
                GaussianPriceSource::neumaier(run_.sums(i), run_.sums_lo(i), last_.sum(static_cast<Index>(r)));
                GaussianPriceSource::neumaier(run_.sums(i), run_.sums_lo(i), last_.sum_lo(static_cast<Index>(r)));
                run_.counts[i] += delta_n;
            }
            vals[r] = estimate(i);
            est(i) = vals[r];
        }
        run_.level_estimates.push_back(std::move(est));
        run_.pricings += delta_n * static_cast<Count>(cur.size());
        run_.realized.n.push_back(run_.realized.n.back() + delta_n);
        IndexList next = rank_select(cur, vals, keep);
        run_.survivors.push_back(std::move(next));
        run_.realized.q.push_back(keep);
        return current();
    }

    // Final level: prices delta_n paths for the survivors and averages.
    ScreeningRun finish(Count delta_n)
    {
        const IndexList keep_set = current();
        advance(delta_n, static_cast<Count>(keep_set.size()));
        run_.survivors.pop_back();
        run_.realized.q.pop_back();
        double s = 0.0;
        for (Index i : keep_set) s += estimate(i);
        run_.es_hat = s / static_cast<double>(keep_set.size());
        return run_;
    }

private:
    PriceSource& source_;
    Rng& rng_;
    Scatter scatter_;
    ScreeningRun run_;
    BatchMoments last_;
};

inline ScreeningRun run_screening(const Strategy& s, Index n_w, PriceSource& source, Rng& rng)
{
    const Index n_s = source.dimension();
    s.validate(n_s, n_w);
    ScreeningSession session(n_s, source, rng);
    const int L = s.levels();
    for (int l = 1; l <= L - 1; ++l) session.advance(s.delta_n(l), s.q[l]);
    return session.finish(s.delta_n(L));
}

} // namespace esscreen
