// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "esscreen/model.hpp"

namespace esscreen {

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
inline double sigmoid(double z)
{
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// One hidden softplus layer, linear scalar output. Predictions are in
// target units: output * target_scale.
class PolicyNet {
public:
    Matrix W1;   // hidden x d
    Vector b1;   // hidden
    Vector w2;   // hidden
    double b2 = 0.0;
    double target_scale = 1.0;

    PolicyNet() = default;
    PolicyNet(Index d, Index hidden) : W1(Matrix::Zero(hidden, d)), b1(Vector::Zero(hidden)), w2(Vector::Zero(hidden)) {}

    Index inputs() const { return W1.cols(); }
    Index hidden() const { return W1.rows(); }
    Index parameter_count() const { return W1.size() + b1.size() + w2.size() + 1; }

    void xavier_init(Rng& rng)
    {
        const double a1 = std::sqrt(6.0 / static_cast<double>(inputs() + hidden()));
        const double a2 = std::sqrt(6.0 / static_cast<double>(hidden() + 1));
        for (Index c = 0; c < W1.cols(); ++c)
            for (Index r = 0; r < W1.rows(); ++r) W1(r, c) = a1 * (2.0 * rng.uniform() - 1.0);
        for (Index r = 0; r < w2.size(); ++r) w2(r) = a2 * (2.0 * rng.uniform() - 1.0);
        b1.setZero();
        b2 = 0.0;
    }

    // Raw network output for columns of X (d x n), in scaled target units.
    Vector raw(const Matrix& X) const
    {
        Matrix Z = W1 * X;
        Z.colwise() += b1;
        Z = Z.unaryExpr([](double z) { return softplus(z); });
        Vector out = Z.transpose() * w2;
        out.array() += b2;
        return out;
    }

    Vector predict(const Matrix& X) const { return raw(X) * target_scale; }
    double predict(const Vector& x) const { return predict(Matrix(x))(0); }

    // Pre-activation split: the caller supplies W1 * x_fixed once and the
    // varying columns separately.
    double raw_from_preactivation(const Vector& z) const
    {
        double s = b2;
        for (Index r = 0; r < z.size(); ++r) s += w2(r) * softplus(z(r) + b1(r));
        return s;
    }

    struct Gradient {
        Matrix W1;
        Vector b1;
        Vector w2;
        double b2 = 0.0;
    };

    // Mean |raw - y|^r over columns; fills the exact gradient when g != nullptr.
    double loss(const Matrix& X, const Vector& y, double r, Gradient* g = nullptr) const
    {
        const Index n = X.cols();
        Matrix Z = W1 * X;
        Z.colwise() += b1;
        Matrix H = Z.unaryExpr([](double z) { return softplus(z); });
        Vector out = H.transpose() * w2;
        out.array() += b2;
        const Vector e = out - y;
        const double inv_n = 1.0 / static_cast<double>(n);
        double l = 0.0;
        for (Index c = 0; c < n; ++c) l += std::pow(std::abs(e(c)), r);
        l *= inv_n;
        if (g) {
            Vector d(n);
            for (Index c = 0; c < n; ++c) {
                const double a = std::abs(e(c));
                const double s = e(c) > 0.0 ? 1.0 : (e(c) < 0.0 ? -1.0 : 0.0);
                d(c) = r * (a == 0.0 && r < 1.0 ? 0.0 : std::pow(a, r - 1.0)) * s * inv_n;
            }
            g->b2 = d.sum();
            g->w2 = H * d;
            Matrix dZ = (w2 * d.transpose()).cwiseProduct(Z.unaryExpr([](double z) { return sigmoid(z); }));
            g->b1 = dZ.rowwise().sum();
            g->W1 = dZ * X.transpose();
        }
        return l;
    }

    void step(const Gradient& g, double lr)
    {
        W1 -= lr * g.W1;
        b1 -= lr * g.b1;
        w2 -= lr * g.w2;
        b2 -= lr * g.b2;
    }

    Vector flatten() const
    {
        Vector v(parameter_count());
        Index o = 0;
        v.segment(o, W1.size()) = Eigen::Map<const Vector>(W1.data(), W1.size());
        o += W1.size();
        v.segment(o, b1.size()) = b1;
        o += b1.size();
        v.segment(o, w2.size()) = w2;
        o += w2.size();
        v(o) = b2;
        return v;
    }

    void unflatten(const Vector& v)
    {
        Index o = 0;
        Eigen::Map<Vector>(W1.data(), W1.size()) = v.segment(o, W1.size());
        o += W1.size();
        b1 = v.segment(o, b1.size());
        o += b1.size();
        w2 = v.segment(o, w2.size());
        o += w2.size();
        b2 = v(o);
    }

    static Vector flatten(const Gradient& g)
    {
        Vector v(g.W1.size() + g.b1.size() + g.w2.size() + 1);
        Index o = 0;
        v.segment(o, g.W1.size()) = Eigen::Map<const Vector>(g.W1.data(), g.W1.size());
        o += g.W1.size();
        v.segment(o, g.b1.size()) = g.b1;
        o += g.b1.size();
        v.segment(o, g.w2.size()) = g.w2;
        o += g.w2.size();
        v(o) = g.b2;
        return v;
    }

    bool finite() const { return W1.allFinite() && b1.allFinite() && w2.allFinite() && std::isfinite(b2); }
};

// Training samples, one column per sample, grouped by (k, j) so batches can
// be drawn as a product of a strategy subset and a book subset.
struct TrainingSet {
    Matrix X;               // d x n
    Vector y;               // raw targets
    std::vector<int> k_of;  // group ids per column
    std::vector<int> j_of;
};

struct TrainSchedule {
    Count steps = 20000;
    double learning_rate = 1e-2;
    double r = 2.0;
    Count batch_change = 1000;
    int k_batch_size = 4;
    int j_batch_size = 4;
};

struct TrainTrace {
    std::vector<double> loss;
    double mean_log_loss() const
    {
        if (loss.empty()) return std::numeric_limits<double>::infinity();
        double s = 0.0;
        for (double l : loss) {
            if (!std::isfinite(l)) return std::numeric_limits<double>::infinity();
            s += std::log(std::max(l, 1e-300));
        }
        return s / static_cast<double>(loss.size());
    }
};

struct divergence_error : numerical_error {
    Count iteration;
    divergence_error(const std::string& what, Count it) : numerical_error(what), iteration(it) {}
};

inline double default_target_scale(const Vector& y)
{
    const double s = y.cwiseAbs().mean();
    return s > 0.0 && std::isfinite(s) ? s : 1.0;
}

namespace detail {

inline std::vector<Index> draw_batch(const TrainingSet& ts, const TrainSchedule& sc, Rng& rng)
{
    std::vector<int> ks(ts.k_of), js(ts.j_of);
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    std::sort(js.begin(), js.end());
    js.erase(std::unique(js.begin(), js.end()), js.end());
    auto shuffle = [&](std::vector<int>& v) {
        for (std::size_t a = v.size(); a > 1; --a) {
            const std::size_t b = static_cast<std::size_t>(rng() % a);
            std::swap(v[a - 1], v[b]);
        }
    };
    shuffle(ks);
    shuffle(js);
    ks.resize(std::min<std::size_t>(ks.size(), static_cast<std::size_t>(sc.k_batch_size)));
    js.resize(std::min<std::size_t>(js.size(), static_cast<std::size_t>(sc.j_batch_size)));
    std::vector<Index> cols;
    for (Index c = 0; c < ts.X.cols(); ++c)
        if (std::find(ks.begin(), ks.end(), ts.k_of[c]) != ks.end() && std::find(js.begin(), js.end(), ts.j_of[c]) != js.end())
            cols.push_back(c);
    if (cols.empty()) cols.push_back(static_cast<Index>(rng() % static_cast<std::uint64_t>(ts.X.cols())));
    return cols;
}

} // namespace detail

// Minibatch gradient descent on mean |pred - target|^r (targets divided by net.target_scale).
inline TrainTrace train_level(PolicyNet& net, const TrainingSet& ts, const TrainSchedule& sc, Rng& rng)
{
    require(ts.X.cols() > 0 && ts.X.cols() == ts.y.size(), "train_level: empty or inconsistent dataset");
    require(ts.X.rows() == net.inputs(), "train_level: input dimension mismatch");
    TrainTrace trace;
    trace.loss.reserve(static_cast<std::size_t>(sc.steps));
    Matrix Xb;
    Vector yb;
    PolicyNet::Gradient g;
    for (Count it = 0; it < sc.steps; ++it) {
        if (it % std::max<Count>(sc.batch_change, 1) == 0) {
            const auto cols = detail::draw_batch(ts, sc, rng);
            Xb.resize(ts.X.rows(), static_cast<Index>(cols.size()));
            yb.resize(static_cast<Index>(cols.size()));
            for (std::size_t c = 0; c < cols.size(); ++c) {
                Xb.col(static_cast<Index>(c)) = ts.X.col(cols[c]);
                yb(static_cast<Index>(c)) = ts.y(cols[c]) / net.target_scale;
            }
        }
        const double l = net.loss(Xb, yb, sc.r, &g);
        if (!std::isfinite(l)) {
            trace.loss.push_back(l);
            throw divergence_error("training diverged at iteration " + std::to_string(it), it);
        }
        trace.loss.push_back(l);
        net.step(g, sc.learning_rate);
        if (!net.finite()) throw divergence_error("training diverged at iteration " + std::to_string(it), it);
    }
    return trace;
}

struct RateSearchResult {
    PolicyNet net;
    double probe_rate = 0.0;
    double final_rate = 0.0;
    int winner = 0;  // 1-based
    std::vector<TrainTrace> probes;
    TrainTrace final_trace;
};

// Probes m fresh nets at base/10^{k-1}, keeps the lowest mean log-loss,
// then continues it for `steps` iterations at base/10^k.
inline RateSearchResult learning_rate_search(int m, double base_rate, Count probe_steps, const TrainingSet& ts,
                                             TrainSchedule sc, Index hidden, std::uint64_t seed)
{
    require(m >= 1, "learning_rate_search: need at least one candidate");
    RateSearchResult res;
    double best = std::numeric_limits<double>::infinity();
    std::vector<PolicyNet> nets;
    const double scale = default_target_scale(ts.y);
    for (int k = 1; k <= m; ++k) {
        Rng rng = derive_stream(seed, {static_cast<std::uint64_t>(k)});
        PolicyNet net(ts.X.rows(), hidden);
        net.xavier_init(rng);
        net.target_scale = scale;
        TrainSchedule probe = sc;
        probe.steps = probe_steps;
        probe.learning_rate = base_rate / std::pow(10.0, k - 1);
        TrainTrace tr;
        try {
            tr = train_level(net, ts, probe, rng);
        } catch (const divergence_error&) {
            tr.loss.push_back(std::numeric_limits<double>::infinity());
        }
        const double score = tr.mean_log_loss();
        if (score < best) {
            best = score;
            res.winner = k;
            res.net = net;
            res.probe_rate = probe.learning_rate;
        }
        res.probes.push_back(std::move(tr));
    }
    if (res.winner == 0) {
        std::ostringstream os;
        os << "learning_rate_search: all " << m << " candidates diverged; final losses:";
        for (const auto& p : res.probes) os << ' ' << p.loss.back();
        throw numerical_error(os.str());
    }
    Rng rng = derive_stream(seed, {1000u});
    sc.learning_rate = base_rate / std::pow(10.0, res.winner);
    res.final_rate = sc.learning_rate;
    res.final_trace = train_level(res.net, ts, sc, rng);
    return res;
}

} // namespace esscreen
