// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "esscreen/bounds.hpp"

using namespace esscreen;

namespace {

// Gamma(s) with t = u^k, k chosen so k*s is an integer and the integrand is smooth.
double gamma_by_quadrature(double s, double k)
{
    const int n = 200000;
    const double b = std::pow(200.0, 1.0 / k), h = b / n;
    auto f = [&](double u) { return k * std::pow(u, k * s - 1.0) * std::exp(-std::pow(u, k)); };
    double acc = f(0.0) + f(b);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(i * h);
    return acc * h / 3.0;
}

ScenarioParams linear_world(Index n, double delta0, double sd, double rho)
{
    return {synthetic_book(n, delta0), build_equicorrelated({sd, rho}, n)};
}

// Direct double loop over the sorted book.
double selection_oracle(Count q_prev, Count q_next, double n, const ScenarioParams& t, Index n_w, double p, double c)
{
    const Index ns = t.size();
    std::vector<Index> ord(static_cast<std::size_t>(ns));
    std::iota(ord.begin(), ord.end(), Index{0});
    std::sort(ord.begin(), ord.end(), [&](Index a, Index b) { return t.mu(a) != t.mu(b) ? t.mu(a) > t.mu(b) : a < b; });
    double mx = 0.0;
    for (Index i = 0; i < n_w; ++i)
        for (Index k = q_next; k < ns; ++k) {
            const Index a = ord[i], b = ord[k];
            const double g = t.mu(a) - t.mu(b);
            if (g <= 0.0) continue;
            const double v = t.sigma(a, a) + t.sigma(b, b) - 2.0 * t.sigma(a, b);
            mx = std::max(mx, g * std::exp(-n * g * g / (2.0 * p * (v + c * g))));
        }
    return std::pow(static_cast<double>(q_prev - q_next), 1.0 / p) * mx;
}

} // namespace

TEST(Bernstein, Examples)
{
    EXPECT_EQ(bernstein_tail(0.0, 10, 1.0, 0.0), 1.0);
    EXPECT_NEAR(bernstein_tail(0.5, 200, 1.0, 0.0), std::exp(-25.0), 1e-25);
    EXPECT_NEAR(bernstein_tail(0.5, 200, 1.0, 0.0), 1.3888e-11, 1e-14);
    EXPECT_THROW(bernstein_tail(-1.0, 1, 1.0, 0.0), std::invalid_argument);
    EXPECT_THROW(bernstein_tail(1.0, 1, -1.0, 0.0), std::invalid_argument);
}

TEST(Bernstein, MonotoneInXAndN)
{
    double prev = 1.0;
    for (double x = 0.0; x < 5.0; x += 0.1) {
        const double b = bernstein_tail(x, 10, 2.0, 0.3);
        EXPECT_LE(b, prev);
        prev = b;
    }
    EXPECT_GE(bernstein_tail(0.3, 10, 1.0, 0.0), bernstein_tail(0.3, 20, 1.0, 0.0));
}

TEST(Bernstein, DominatesGaussianMeanTail)
{
    Rng rng(17);
    const int draws = 100000, n = 10;
    std::vector<double> means(draws);
    for (auto& m : means) {
        double s = 0.0;
        for (int k = 0; k < n; ++k) s += rng.normal();
        m = s / n;
    }
    for (double x = 0.0; x <= 1.5; x += 0.1) {
        const double emp = std::count_if(means.begin(), means.end(), [&](double m) { return m > x; }) / double(draws);
        const double se = std::sqrt(std::max(emp * (1 - emp), 1.0 / draws) / draws);
        EXPECT_LE(emp, bernstein_tail(x, n, 1.0, 0.0) + 3.0 * se) << x;
    }
}

TEST(Gamma, Constants)
{
    auto g1 = gamma_constants(1.0);
    EXPECT_NEAR(g1.c_sigma, std::sqrt(M_PI), 1e-12);
    EXPECT_NEAR(g1.c_c, 4.0, 1e-12);
    auto g2 = gamma_constants(2.0);
    EXPECT_NEAR(g2.c_sigma, 2.0, 1e-12);
    EXPECT_NEAR(g2.c_c, 16.0, 1e-11);
    auto g4 = gamma_constants(4.0);
    EXPECT_NEAR(g4.c_sigma, 8.0, 1e-11);
    EXPECT_NEAR(g4.c_c, 1536.0, 1e-9);
    EXPECT_THROW(gamma_constants(0.5), invalid_parameter);
}

TEST(Gamma, LanczosAgainstQuadrature)
{
    for (double p : {1.0, 1.5, 2.0, 3.0, 4.0})
        for (double s : {p / 2.0, p}) {
            const double q = gamma_by_quadrature(s, s == 0.75 ? 4.0 : 2.0);
            EXPECT_NEAR(lanczos_gamma(s) / q, 1.0, 1e-10) << s;
        }
}

TEST(Selection, VanishesWithPathsAndWithoutDrop)
{
    const ScenarioParams t = linear_world(40, 1.0, 3.0, 0.2);
    RankedBook book(t, 3);
    SubGammaParams sub;
    EXPECT_EQ(selection_term(10, 10, 5, book, sub), 0.0);
    EXPECT_LT(selection_term(40, 10, 1e12, book, sub), 1e-300);
    EXPECT_GT(selection_term(40, 10, 5, book, sub), 0.0);
}

TEST(Selection, MatchesDoubleLoopOracle)
{
    Rng rng(2);
    for (int rep = 0; rep < 20; ++rep) {
        const Index n = 20;
        Matrix a(n, n);
        for (Index c = 0; c < n; ++c)
            for (Index r = 0; r < n; ++r) a(r, c) = rng.normal();
        ScenarioParams t;
        t.sigma = a * a.transpose() / n;
        t.mu = Vector(n);
        for (Index i = 0; i < n; ++i) t.mu(i) = 3.0 * rng.normal();
        const double p = rep % 2 ? 1.0 : 2.0, c = rep % 3 ? 0.0 : 0.5;
        RankedBook book(t, 4);
        const double got = selection_term(n, 8, 7.0, book, {c, p});
        EXPECT_NEAR(got, selection_oracle(n, 8, 7.0, t, 4, p, c), 1e-12 * (1.0 + got));
    }
}

TEST(Fp, TerminalTermEquicorrelated)
{
    const double sd = 2.2e6;
    const ScenarioParams t = linear_world(253, 1e9, sd, 0.6);  // selection terms vanish
    const Strategy s = Strategy::from_lists({253, 6}, {0, 10000, 10000});
    const double expect = (253.0 / 6.0) * std::sqrt(M_PI) * sd / std::sqrt(10000.0);
    EXPECT_NEAR(F_p(s, t, 6, {}), expect, 1e-9 * expect);
}

TEST(Fp, TwoTerminalPieces)
{
    const double sd = 5.0;
    const ScenarioParams t = linear_world(10, 1e6, sd, 0.0);
    const Strategy s = Strategy::from_lists({10, 3}, {0, 100, 400});
    const double rp = std::sqrt(M_PI);
    const double b = (300.0 / 400.0) * rp * sd / std::sqrt(300.0);
    const double c = (100.0 / 400.0) * (10.0 / 3.0) * rp * sd / std::sqrt(100.0);
    EXPECT_NEAR(F_p(s, t, 3, {}), b + c, 1e-12);
}

TEST(Fp, NoPathsIsInfinite)
{
    const ScenarioParams t = linear_world(10, 1.0, 1.0, 0.0);
    EXPECT_TRUE(std::isinf(F_p(Strategy::from_lists({10, 3}, {0, 0, 0}), t, 3, {})));
    EXPECT_TRUE(std::isfinite(F_p(Strategy::from_lists({10, 5, 3}, {0, 20, 20, 20}), t, 3, {})));
}

TEST(Fp, DeterministicBeatsUniform)
{
    const ScenarioParams t = linear_world(253, 2766.0, 2.2e6, 0.6);
    const Strategy det = Strategy::from_lists({253, 35, 10, 6}, {0, 6000, 44000, 44000, 1235666});
    const Strategy uni = uniform_strategy(253, 6, 10000000);
    EXPECT_LT(F_p(det, t, 6, {}), F_p(uni, t, 6, {}));
}

TEST(Fp, SelectionTermsMonotoneInN)
{
    const ScenarioParams t = linear_world(50, 2.0, 10.0, 0.3);
    DeterministicObjective obj(t, 5, {});
    double prev = std::numeric_limits<double>::infinity();
    for (Count n = 1; n < 2000; n += 37) {
        const double v = obj.selection(50, 12, n);
        EXPECT_LE(v, prev);
        prev = v;
    }
}

TEST(Robust, DegenerateIntervalMatchesConstantGap)
{
    RobustBounds rb;
    rb.sigma_bar = 3.0;
    rb.delta_lo[5] = rb.delta_hi[5] = 2.0;
    SubGammaParams sub{0.1, 1.0};
    RobustObjective obj(rb, 20, 2, sub);
    const double expect = 15.0 * selection_kernel(2.0, 40.0, 9.0, sub);
    EXPECT_NEAR(obj.selection(20, 5, 40), expect, 1e-15);
}

TEST(Robust, StationaryPointAndClamp)
{
    const double sb = 4.0, n = 50.0;
    SubGammaParams sub{0.0, 1.0};
    const double ds = sb * std::sqrt(1.0 / n);
    EXPECT_NEAR(robust_stationary_point(n, sb, sub), ds, 1e-15);
    // brute-force maximum over a fine grid
    double best = 0.0;
    for (double d = 0.0; d <= 5.0; d += 1e-5) best = std::max(best, robust_g(d, n, sb, sub));
    EXPECT_NEAR(robust_max(0.0, 5.0, n, sb, sub), best, 1e-9);
    EXPECT_NEAR(robust_max(1.0, 5.0, n, sb, sub), robust_g(1.0, n, sb, sub), 1e-15);
    EXPECT_NEAR(robust_max(0.01, 0.1, n, sb, sub), robust_g(0.1, n, sb, sub), 1e-15);
}

TEST(Robust, StationaryPointWithC)
{
    const double sb = 2.0, n = 30.0;
    SubGammaParams sub{0.7, 1.5};
    const double d = robust_stationary_point(n, sb, sub);
    const double h = 1e-6;
    const double slope = (robust_g(d + h, n, sb, sub) - robust_g(d - h, n, sb, sub)) / (2 * h);
    EXPECT_NEAR(slope, 0.0, 1e-6);
}

TEST(Robust, WideningNeverDecreases)
{
    const ScenarioParams t = linear_world(30, 1.0, 4.0, 0.3);
    const std::vector<Count> grid{3, 6, 10, 30};
    RobustBounds rb = bracket_book(t, 3, grid);
    const Strategy s = Strategy::from_lists({30, 10, 3}, {0, 30, 80, 150});
    const double base = F_robust(s, rb, 30, 3, {});
    RobustBounds wide = rb;
    for (auto& [q, v] : wide.delta_lo) v *= 0.5;
    for (auto& [q, v] : wide.delta_hi) v *= 2.0;
    EXPECT_GE(F_robust(s, wide, 30, 3, {}), base);
}

TEST(Robust, DominatesFpOnLinearBook)
{
    const ScenarioParams t = linear_world(60, 2.0, 6.0, 0.5);
    const std::vector<Count> grid{4, 8, 15, 30, 60};
    const RobustBounds rb = bracket_book(t, 4, grid);
    for (const Strategy& s : {Strategy::from_lists({60, 15, 4}, {0, 20, 60, 200}),
                              Strategy::from_lists({60, 30, 8, 4}, {0, 10, 30, 90, 300})})
        EXPECT_GE(F_robust(s, rb, 60, 4, {}), F_p(s, t, 4, {}) * (1.0 - 1e-12));
}

namespace {

double f_ad_oracle(const Vector& mt, const Matrix& st, const Vector& mh, const Vector& rank_by, Count q_next, Count n_prev,
                   Count dn, Index n_w, double c, double p)
{
    const Index q = mt.size();
    std::vector<Index> ord(static_cast<std::size_t>(q));
    std::iota(ord.begin(), ord.end(), Index{0});
    std::stable_sort(ord.begin(), ord.end(), [&](Index a, Index b) { return rank_by(a) > rank_by(b); });
    double mx = 0.0;
    for (Index a = 0; a < n_w; ++a)
        for (Index b = q_next; b < q; ++b) {
            const Index i = ord[a], k = ord[b];
            const double g = mt(i) - mt(k);
            const double rho = g + (double(n_prev) / double(dn)) * (mh(i) - mh(k));
            const double s2 = st(i, i) + st(k, k) - 2 * st(i, k);
            const double w = rho >= 0 ? std::exp(-double(dn) * rho * rho / (2 * (s2 + c * rho))) : 1.0;
            mx = std::max(mx, std::pow(std::max(g, 0.0), p) * w);
        }
    return double(q - q_next) * mx;
}

} // namespace

TEST(AdaptiveBound, MatchesTranscription)
{
    Rng rng(31);
    for (int rep = 0; rep < 50; ++rep) {
        const Index q = 10;
        Vector mt(q), mh(q), rk(q);
        Matrix a(q, q);
        for (Index i = 0; i < q; ++i) {
            mt(i) = 5.0 * rng.normal();
            mh(i) = mt(i) + rng.normal();
            rk(i) = mt(i) + 0.5 * rng.normal();
            for (Index j = 0; j < q; ++j) a(i, j) = rng.normal();
        }
        const Matrix st = a * a.transpose() / q;
        IndexList ids;
        for (Index i = 0; i < q; ++i) ids.push_back(100 + 7 * i);
        const double c = rep % 2 ? 0.3 : 0.0, p = rep % 3 ? 1.0 : 2.0;
        AdaptiveLevelInput in{&mt, &st, &mh, &ids, &rk, 5, 40, 25, 3};
        const double got = f_p_ad(in, {c, p});
        EXPECT_NEAR(got, f_ad_oracle(mt, st, mh, rk, 5, 40, 25, 3, c, p), 1e-12 * (1.0 + got));
    }
}

TEST(AdaptiveBound, FirstLevelIsDeterministicKernel)
{
    const ScenarioParams t = linear_world(12, 1.0, 1.5, 0.2);
    const Vector mh = Vector::Zero(12);
    const IndexList ids = iota_indexes(12);
    AdaptiveLevelInput in{&t.mu, &t.sigma, &mh, &ids, nullptr, 5, 0, 30, 3};
    RankedBook book(t, 3);
    EXPECT_NEAR(f_p_ad(in, {}), selection_term(12, 5, 30.0, book, {}), 1e-14);
}

TEST(AdaptiveBound, InvertedEstimatesGetFullWeight)
{
    Vector mt(3), mh(3);
    mt << 10.0, 0.0, -1.0;
    mh << -50.0, 0.0, 0.0;  // rho = 10 + 1 * (-50) < 0
    const Matrix st = Matrix::Identity(3, 3);
    const IndexList ids{0, 1, 2};
    AdaptiveLevelInput in{&mt, &st, &mh, &ids, nullptr, 2, 10, 10, 1};
    EXPECT_DOUBLE_EQ(f_p_ad(in, {}), 11.0);
    in.delta_n = 0;
    EXPECT_THROW(f_p_ad(in, {}), invalid_parameter);
}

TEST(AdaptiveBound, DecreasingInDeltaN)
{
    const ScenarioParams t = linear_world(15, 1.0, 2.0, 0.1);
    const Vector mh = t.mu;
    const IndexList ids = iota_indexes(15);
    double prev = std::numeric_limits<double>::infinity();
    for (Count dn = 1; dn < 500; dn += 13) {
        AdaptiveLevelInput in{&t.mu, &t.sigma, &mh, &ids, nullptr, 6, 0, dn, 3};
        const double v = f_p_ad(in, {});
        EXPECT_LE(v, prev);
        prev = v;
    }
}
