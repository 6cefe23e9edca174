// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <unordered_map>
#include <vector>

#include "esscreen/model.hpp"
#include "esscreen/screener.hpp"

namespace esscreen {

struct SubGammaParams {
    double c = 0.0;
    double p = 1.0;
};

namespace detail {

constexpr double min_exponent = -745.0;

inline double safe_exp(double x) { return std::exp(std::max(x, min_exponent)); }

inline std::uint64_t pair_key(Count a, Count b)
{
    return (static_cast<std::uint64_t>(a) << 40) ^ static_cast<std::uint64_t>(b);
}

} // namespace detail

inline double bernstein_tail(double x, double n, double var, double c)
{
    if (x < 0.0 || n < 0.0 || var < 0.0 || c < 0.0)
        throw std::invalid_argument("bernstein_tail: negative input");
    if (x == 0.0) return 1.0;
    const double denom = 2.0 * (var + c * x);
    if (denom <= 0.0) return 0.0;
    return std::min(1.0, detail::safe_exp(-n * x * x / denom));
}

// Lanczos approximation, g = 7, n = 9.
inline double lanczos_gamma(double x)
{
    static constexpr double g = 7.0;
    static constexpr double coef[] = {0.99999999999980993,   676.5203681218851,     -1259.1392167224028,
                                      771.32342877765313,    -176.61502916214059,   12.507343278686905,
                                      -0.13857109526572012,  9.9843695780195716e-6, 1.5056327351493116e-7};
    if (x < 0.5) return M_PI / (std::sin(M_PI * x) * lanczos_gamma(1.0 - x));
    x -= 1.0;
    double a = coef[0];
    const double t = x + g + 0.5;
    for (int k = 1; k < 9; ++k) a += coef[k] / (x + k);
    return std::sqrt(2.0 * M_PI) * std::pow(t, x + 0.5) * std::exp(-t) * a;
}

struct GammaConstants {
    double c_sigma;
    double c_c;
};

inline GammaConstants gamma_constants(double p)
{
    require(p >= 1.0, "gamma_constants: p must be >= 1");
    return {std::pow(2.0, p - 1.0) * lanczos_gamma(p / 2.0), std::pow(4.0, p) * lanczos_gamma(p)};
}

// (C_sigma p s^p / n^{p/2} + C_c p c^p / n^p)^{1/p}
inline double mc_moment(double s, double n, const SubGammaParams& sub)
{
    const GammaConstants g = gamma_constants(sub.p);
    const double p = sub.p;
    const double v = g.c_sigma * p * std::pow(s, p) / std::pow(n, p / 2.0) + g.c_c * p * std::pow(sub.c, p) / std::pow(n, p);
    return std::pow(v, 1.0 / p);
}

inline double selection_kernel(double gap, double n, double pair_var, const SubGammaParams& sub)
{
    if (gap <= 0.0) return 0.0;
    const double denom = 2.0 * sub.p * (pair_var + sub.c * gap);
    if (denom <= 0.0) return n > 0.0 ? 0.0 : gap;
    return gap * detail::safe_exp(-n * gap * gap / denom);
}

// Book sorted by decreasing mean (ties by index).
class RankedBook {
public:
    RankedBook(const ScenarioParams& theta, Index n_w) : n_w_(n_w)
    {
        require(n_w >= 1 && n_w <= theta.size(), "RankedBook: n_w out of range");
        order_ = rank_select(theta.mu, theta.size());
        const Index n = theta.size();
        mu_.resize(n);
        var_.resize(n);
        for (Index r = 0; r < n; ++r) {
            mu_(r) = theta.mu(order_[r]);
            var_(r) = theta.sigma(order_[r], order_[r]);
        }
        cross_.resize(n_w, n);
        for (Index a = 0; a < n_w; ++a)
            for (Index b = 0; b < n; ++b) cross_(a, b) = theta.sigma(order_[a], order_[b]);
        sd_sorted_ = var_.cwiseMax(0.0).cwiseSqrt();
        std::sort(sd_sorted_.data(), sd_sorted_.data() + n, std::greater<>());
    }

    Index size() const { return mu_.size(); }
    Index n_w() const { return n_w_; }
    double mu(Index r) const { return mu_(r); }
    double pair_variance(Index a, Index b) const { return var_(a) + var_(b) - 2.0 * cross_(a, b); }
    const Vector& sd_descending() const { return sd_sorted_; }

private:
    Index n_w_;
    IndexList order_;
    Vector mu_, var_, sd_sorted_;
    Matrix cross_;
};

// max over (i,k) in [1,n_w] x [q_next+1, n_s] of the selection kernel.
inline double selection_max(Count q_next, double n_paths, const RankedBook& book, const SubGammaParams& sub)
{
    double best = 0.0;
    for (Index k = q_next; k < book.size(); ++k)
        for (Index i = 0; i < book.n_w(); ++i)
            best = std::max(best, selection_kernel(book.mu(i) - book.mu(k), n_paths, book.pair_variance(i, k), sub));
    return best;
}

inline double selection_term(Count q_prev, Count q_next, double n_paths, const RankedBook& book, const SubGammaParams& sub)
{
    const Count dq = q_prev - q_next;
    if (dq <= 0) return 0.0;
    return std::pow(static_cast<double>(dq), 1.0 / sub.p) * selection_max(q_next, n_paths, book, sub);
}

// Bound objective split into per-level selection terms and a terminal MC term.
class BoundObjective {
public:
    virtual ~BoundObjective() = default;
    virtual double selection(Count q_prev, Count q_next, Count n_paths) const = 0;
    virtual double terminal(Count n_prev, Count n_last) const = 0;
    virtual Index n_s() const = 0;
    virtual Index n_w() const = 0;
};

// Evaluated backward so the planner reproduces the same floating-point sum.
inline double evaluate_bound(const BoundObjective& obj, const Strategy& s)
{
    s.validate(obj.n_s(), obj.n_w());
    const int L = s.levels();
    double total = obj.terminal(s.n[L - 1], s.n[L]);
    for (int l = L - 1; l >= 1; --l) total = obj.selection(s.q[l - 1], s.q[l], s.n[l]) + total;
    return total;
}

class DeterministicObjective : public BoundObjective {
public:
    DeterministicObjective(const ScenarioParams& theta, Index n_w, SubGammaParams sub)
        : book_(theta, n_w), sub_(sub)
    {
    }

    double selection(Count q_prev, Count q_next, Count n_paths) const override
    {
        const Count dq = q_prev - q_next;
        if (dq <= 0) return 0.0;
        const auto key = detail::pair_key(q_next, n_paths);
        auto it = cache_.find(key);
        double mx;
        if (it == cache_.end()) {
            mx = selection_max(q_next, static_cast<double>(n_paths), book_, sub_);
            cache_.emplace(key, mx);
        } else {
            mx = it->second;
        }
        return std::pow(static_cast<double>(dq), 1.0 / sub_.p) * mx;
    }

    double terminal(Count n_prev, Count n_last) const override
    {
        if (n_prev <= 0 || n_last <= 0) return std::numeric_limits<double>::infinity();
        const Index nw = book_.n_w();
        const Vector& sd = book_.sd_descending();
        const double inv_nw = 1.0 / static_cast<double>(nw);
        double b = 0.0;
        const Count dn = n_last - n_prev;
        if (dn > 0) {
            double s = 0.0;
            for (Index r = 0; r < nw; ++r) s += mc_moment(sd(r), static_cast<double>(dn), sub_);
            b = inv_nw * (static_cast<double>(dn) / static_cast<double>(n_last)) * s;
        }
        double s = 0.0;
        for (Index r = 0; r < sd.size(); ++r) s += mc_moment(sd(r), static_cast<double>(n_prev), sub_);
        const double c = inv_nw * (static_cast<double>(n_prev) / static_cast<double>(n_last)) * s;
        return b + c;
    }

    Index n_s() const override { return book_.size(); }
    Index n_w() const override { return book_.n_w(); }
    const RankedBook& book() const { return book_; }

private:
    RankedBook book_;
    SubGammaParams sub_;
    mutable std::unordered_map<std::uint64_t, double> cache_;
};

struct RobustBounds {
    std::map<Count, double> delta_lo;
    std::map<Count, double> delta_hi;
    double sigma_bar = 0.0;

    std::pair<double, double> interval(Count q) const
    {
        auto lo = delta_lo.find(q);
        auto hi = delta_hi.find(q);
        if (lo == delta_lo.end() || hi == delta_hi.end())
            throw invalid_parameter("robust bounds do not cover q = " + std::to_string(q));
        return {lo->second, hi->second};
    }
};

inline double robust_g(double delta, double n, double sigma_bar, const SubGammaParams& sub)
{
    return selection_kernel(delta, n, sigma_bar * sigma_bar, sub);
}

// Interior stationary point of robust_g on (0, inf).
inline double robust_stationary_point(double n, double sigma_bar, const SubGammaParams& sub)
{
    const double v = sigma_bar * sigma_bar;
    if (n <= 0.0) return std::numeric_limits<double>::infinity();
    if (v <= 0.0 && sub.c <= 0.0) return 0.0;
    if (sub.c == 0.0) return sigma_bar * std::sqrt(sub.p / n);
    auto h = [&](double d) {
        const double a = v + sub.c * d;
        return n * d * d * (2.0 * v + sub.c * d) - 2.0 * sub.p * a * a;
    };
    double lo = 0.0, hi = std::max(1.0, sigma_bar);
    while (h(hi) < 0.0) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (h(mid) < 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline double robust_max(double lo, double hi, double n, double sigma_bar, const SubGammaParams& sub)
{
    double best = std::max(robust_g(lo, n, sigma_bar, sub), robust_g(hi, n, sigma_bar, sub));
    const double d = robust_stationary_point(n, sigma_bar, sub);
    if (d > lo && d < hi) best = std::max(best, robust_g(d, n, sigma_bar, sub));
    return best;
}

class RobustObjective : public BoundObjective {
public:
    RobustObjective(RobustBounds rb, Index n_s, Index n_w, SubGammaParams sub)
        : rb_(std::move(rb)), n_s_(n_s), n_w_(n_w), sub_(sub)
    {
    }

    double selection(Count q_prev, Count q_next, Count n_paths) const override
    {
        const Count dq = q_prev - q_next;
        if (dq <= 0) return 0.0;
        const auto [lo, hi] = rb_.interval(q_next);
        return std::pow(static_cast<double>(dq), 1.0 / sub_.p) * robust_max(lo, hi, static_cast<double>(n_paths), rb_.sigma_bar, sub_);
    }

    double terminal(Count n_prev, Count n_last) const override
    {
        if (n_prev <= 0 || n_last <= 0) return std::numeric_limits<double>::infinity();
        const double inv_nw = 1.0 / static_cast<double>(n_w_);
        const Count dn = n_last - n_prev;
        double b = 0.0;
        if (dn > 0)
            b = inv_nw * (static_cast<double>(dn) / static_cast<double>(n_last)) *
                (static_cast<double>(n_w_) * mc_moment(rb_.sigma_bar, static_cast<double>(dn), sub_));
        const double c = inv_nw * (static_cast<double>(n_prev) / static_cast<double>(n_last)) *
                         (static_cast<double>(n_s_) * mc_moment(rb_.sigma_bar, static_cast<double>(n_prev), sub_));
        return b + c;
    }

    Index n_s() const override { return n_s_; }
    Index n_w() const override { return n_w_; }

private:
    RobustBounds rb_;
    Index n_s_, n_w_;
    SubGammaParams sub_;
};

inline double F_p(const Strategy& s, const ScenarioParams& theta, Index n_w, const SubGammaParams& sub)
{
    return evaluate_bound(DeterministicObjective(theta, n_w, sub), s);
}

inline double F_robust(const Strategy& s, const RobustBounds& rb, Index n_s, Index n_w, const SubGammaParams& sub)
{
    return evaluate_bound(RobustObjective(rb, n_s, n_w, sub), s);
}

// Robust bounds bracketing a book: delta_lo/hi per q are the smallest and
// largest gaps mu_(i) - mu_(k) over i <= n_w < q < k, sigma_bar the largest
// pair standard deviation.
inline RobustBounds bracket_book(const ScenarioParams& theta, Index n_w, const std::vector<Count>& q_grid)
{
    RankedBook book(theta, n_w);
    RobustBounds rb;
    double sb = 0.0;
    for (Index i = 0; i < n_w; ++i)
        for (Index k = i + 1; k < book.size(); ++k) sb = std::max(sb, book.pair_variance(i, k));
    rb.sigma_bar = std::sqrt(sb);
    for (Count q : q_grid) {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (Index k = q; k < book.size(); ++k)
            for (Index i = 0; i < n_w; ++i) {
                const double g = book.mu(i) - book.mu(k);
                lo = std::min(lo, g);
                hi = std::max(hi, g);
            }
        if (!std::isfinite(lo)) lo = hi = 0.0;
        rb.delta_lo[q] = std::max(lo, 0.0);
        rb.delta_hi[q] = std::max(hi, 0.0);
    }
    return rb;
}

// Adaptive selection bound for one level. All vectors are over the previous
// survivor set J_{l-1} in local order; `ids` holds their original indexes.
struct AdaptiveLevelInput {
    const Vector* mu_tilde = nullptr;
    const Matrix* sigma_tilde = nullptr;
    const Vector* mu_hat_prev = nullptr;
    const IndexList* ids = nullptr;
    const Vector* rank_by = nullptr;  // defaults to mu_tilde
    Count q_next = 0;
    Count n_prev = 0;
    Count delta_n = 0;
    Index n_w = 0;
};

inline double f_p_ad(const AdaptiveLevelInput& in, const SubGammaParams& sub)
{
    if (in.delta_n <= 0) throw invalid_parameter("f_p_ad: delta N must be positive at a selection level");
    const Vector& mt = *in.mu_tilde;
    const Matrix& st = *in.sigma_tilde;
    const Vector& mh = *in.mu_hat_prev;
    const Index q_prev = mt.size();
    require(in.q_next >= in.n_w && in.q_next <= q_prev, "f_p_ad: q_next out of range");
    const Vector& key = in.rank_by ? *in.rank_by : mt;
    std::vector<double> vals(key.data(), key.data() + key.size());
    const IndexList order = rank_select(*in.ids, vals, q_prev);
    // map original ids back to local positions
    std::unordered_map<Index, Index> local;
    for (Index r = 0; r < q_prev; ++r) local[(*in.ids)[r]] = r;
    const double ratio = static_cast<double>(in.n_prev) / static_cast<double>(in.delta_n);
    double best = 0.0;
    for (Index a = 0; a < in.n_w; ++a) {
        const Index i = local[order[a]];
        for (Index b = in.q_next; b < q_prev; ++b) {
            const Index k = local[order[b]];
            const double gap = mt(i) - mt(k);
            const double rho = gap + ratio * (mh(i) - mh(k));
            double w = 1.0;
            if (rho > 0.0) {
                const double v = st(i, i) + st(k, k) - 2.0 * st(i, k);
                const double denom = 2.0 * (v + sub.c * rho);
                w = denom > 0.0 ? detail::safe_exp(-static_cast<double>(in.delta_n) * rho * rho / denom) : 0.0;
            }
            best = std::max(best, std::pow(std::max(gap, 0.0), sub.p) * w);
        }
    }
    return static_cast<double>(q_prev - in.q_next) * best;
}

} // namespace esscreen
