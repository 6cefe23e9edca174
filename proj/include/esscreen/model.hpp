// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "esscreen/error.hpp"
#include "esscreen/rng.hpp"

namespace esscreen {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = std::int64_t;
using Count = std::int64_t;
using IndexList = std::vector<Index>;

inline IndexList iota_indexes(Index n)
{
    IndexList v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), Index{0});
    return v;
}

struct ScenarioParams {
    Vector mu;
    Matrix sigma;

    Index size() const { return mu.size(); }
    double variance(Index i) const { return sigma(i, i); }
    double pair_variance(Index i, Index k) const
    {
        return sigma(i, i) + sigma(k, k) - 2.0 * sigma(i, k);
    }

    void validate() const
    {
        require(sigma.rows() == mu.size() && sigma.cols() == mu.size(),
                "covariance dimension does not match mean vector");
        require(sigma.isApprox(sigma.transpose(), 1e-12) || sigma.isZero(0.0),
                "covariance must be symmetric");
    }
};

struct EquicorrelatedSpec {
    double sigma_scalar = 0.0;
    double rho = 0.0;
};

inline Vector synthetic_book(Index n_s, double delta0, double offset = 0.0)
{
    require(n_s >= 1, "synthetic_book: n_s must be >= 1");
    require(delta0 > 0.0, "synthetic_book: delta0 must be > 0");
    Vector mu(n_s);
    for (Index i = 0; i < n_s; ++i) mu(i) = offset - static_cast<double>(i + 1) * delta0;
    return mu;
}

inline Matrix build_equicorrelated(const EquicorrelatedSpec& spec, Index n_s)
{
    if (!(spec.rho >= 0.0 && spec.rho < 1.0))
        throw invalid_parameter("build_equicorrelated: rho must lie in [0,1)");
    require(spec.sigma_scalar >= 0.0, "build_equicorrelated: sigma must be >= 0");
    const double v = spec.sigma_scalar * spec.sigma_scalar;
    Matrix s = Matrix::Constant(n_s, n_s, spec.rho * v);
    s.diagonal().setConstant(v);
    return s;
}

inline Matrix restrict(const Matrix& a, const IndexList& idx)
{
    const Index n = static_cast<Index>(idx.size());
    Matrix out(n, n);
    for (Index c = 0; c < n; ++c)
        for (Index r = 0; r < n; ++r) out(r, c) = a(idx[r], idx[c]);
    return out;
}

inline Vector restrict(const Vector& v, const IndexList& idx)
{
    Vector out(static_cast<Index>(idx.size()));
    for (std::size_t r = 0; r < idx.size(); ++r) out(static_cast<Index>(r)) = v(idx[r]);
    return out;
}

// Normal-inverse-Wishart hyperparameters. `dof` is the inverse-Wishart
// degrees of freedom, `index_map` the original scenarios covered.
struct NIWParams {
    Vector m;
    double k = 1.0;
    double dof = 0.0;
    Matrix S;
    IndexList index_map;
    Index full_dim = 0;  // dimension dof refers to; 0 means dim()

    Index dim() const { return m.size(); }
    Index base_dim() const { return full_dim > 0 ? full_dim : dim(); }
    // dof of the marginal inverse-Wishart over the retained block.
    double effective_dof() const { return dof - static_cast<double>(base_dim() - dim()); }

    void validate() const
    {
        require(S.rows() == m.size() && S.cols() == m.size(), "NIW: S dimension mismatch");
        require(static_cast<Index>(index_map.size()) == m.size(), "NIW: index_map size mismatch");
        require(k > 0.0, "NIW: k must be > 0");
        require(effective_dof() > static_cast<double>(dim()) + 1.0, "NIW: dof must exceed dim + 1");
    }

    Matrix sigma_mean() const { return S / (effective_dof() - static_cast<double>(dim()) - 1.0); }

    NIWParams restricted(const IndexList& local) const
    {
        NIWParams out;
        out.m = restrict(m, local);
        out.S = restrict(S, local);
        out.k = k;
        out.dof = dof;
        out.full_dim = base_dim();
        out.index_map.reserve(local.size());
        for (Index r : local) out.index_map.push_back(index_map[r]);
        return out;
    }
};

inline NIWParams make_prior(const Vector& m0, double k0, double dof0, const Matrix& sigma)
{
    NIWParams p;
    p.m = m0;
    p.k = k0;
    p.dof = dof0;
    p.S = (dof0 - static_cast<double>(m0.size()) - 1.0) * sigma;
    p.index_map = iota_indexes(m0.size());
    p.validate();
    return p;
}

// Cholesky factor of S, used repeatedly when drawing from IW(dof, S).
class InverseWishart {
public:
    InverseWishart(double dof, const Matrix& S) : dof_(dof), d_(S.rows())
    {
        if (S.isZero(0.0)) {
            zero_ = true;
            return;
        }
        Eigen::LLT<Matrix> llt(S);
        if (llt.info() != Eigen::Success) throw invalid_parameter("inverse-Wishart: scale matrix is not positive definite");
        U_ = llt.matrixL();
        require(dof > static_cast<double>(d_) - 1.0, "inverse-Wishart: dof too small");
    }

    // Returns F with F F^T distributed as IW(dof, S).
    Matrix sample_factor(Rng& rng) const
    {
        if (zero_) return Matrix::Zero(d_, d_);
        Matrix A = Matrix::Zero(d_, d_);
        for (Index c = 0; c < d_; ++c) {
            A(c, c) = std::sqrt(rng.chi_squared(dof_ - static_cast<double>(c)));
            for (Index r = c + 1; r < d_; ++r) A(r, c) = rng.normal();
        }
        // W = U^{-T} A A^T U^{-1} ~ Wishart(dof, S^{-1}); W^{-1} = (U A^{-T})(U A^{-T})^T.
        Matrix Ainv = A.triangularView<Eigen::Lower>().solve(Matrix::Identity(d_, d_));
        return U_.triangularView<Eigen::Lower>() * Ainv.transpose();
    }

    Matrix sample(Rng& rng) const
    {
        Matrix F = sample_factor(rng);
        Matrix out = F * F.transpose();
        return 0.5 * (out + out.transpose());
    }

    Index dim() const { return d_; }

private:
    double dof_;
    Index d_;
    bool zero_ = false;
    Matrix U_;
};

inline ScenarioParams sample_niw(const NIWParams& p, Rng& rng)
{
    p.validate();
    InverseWishart iw(p.effective_dof(), p.S);
    Matrix F = iw.sample_factor(rng);
    ScenarioParams theta;
    theta.sigma = F * F.transpose();
    theta.sigma = 0.5 * (theta.sigma + theta.sigma.transpose());
    Vector z(p.dim());
    for (Index r = 0; r < p.dim(); ++r) z(r) = rng.normal();
    theta.mu = p.m + (F * z) / std::sqrt(p.k);
    return theta;
}

enum class Scatter { none, diagonal, full };

// Sufficient statistics of one batch of price rows over an index list.
// `sum` carries a separate compensation term `sum_lo`.
struct BatchMoments {
    Count count = 0;
    Vector sum;
    Vector sum_lo;
    Vector mean;
    Vector scatter_diag;
    Matrix scatter;
};

class PriceSource {
public:
    virtual ~PriceSource() = default;
    virtual Index dimension() const = 0;
    virtual BatchMoments draw(const IndexList& idx, Count count, Rng& rng, Scatter mode) = 0;
    Count pricings() const { return pricings_; }

protected:
    Count pricings_ = 0;
};

// Gaussian prices N(mu, Sigma). Constant-correlation covariances use a
// single common factor, others a Cholesky factor of the restricted block.
class GaussianPriceSource : public PriceSource {
public:
    explicit GaussianPriceSource(ScenarioParams theta, Count chunk_scalars = Count{1} << 20)
        : theta_(std::move(theta)), chunk_scalars_(std::max<Count>(chunk_scalars, 1))
    {
        theta_.validate();
        detect_one_factor();
    }

    Index dimension() const override { return theta_.size(); }
    bool one_factor() const { return one_factor_; }
    const ScenarioParams& theta() const { return theta_; }

    // Raw rows, generated in the same order draw() consumes the stream.
    RowMatrix rows(const IndexList& idx, Count count, Rng& rng) const
    {
        RowMatrix out(count, static_cast<Index>(idx.size()));
        Prepared prep = prepare(idx);
        fill(prep, out, rng);
        return out;
    }

    BatchMoments draw(const IndexList& idx, Count count, Rng& rng, Scatter mode) override
    {
        require(count >= 0, "price source: negative path count");
        const Index q = static_cast<Index>(idx.size());
        BatchMoments bm;
        bm.sum = Vector::Zero(q);
        bm.sum_lo = Vector::Zero(q);
        bm.mean = Vector::Zero(q);
        if (mode == Scatter::diagonal) bm.scatter_diag = Vector::Zero(q);
        if (mode == Scatter::full) bm.scatter = Matrix::Zero(q, q);
        if (count == 0 || q == 0) return bm;

        Prepared prep = prepare(idx);
        const Count chunk = std::max<Count>(1, chunk_scalars_ / q);
        RowMatrix block;
        Count done = 0;
        while (done < count) {
            const Count rows_now = std::min(chunk, count - done);
            block.resize(rows_now, q);
            fill(prep, block, rng);
            const Vector csum = block.colwise().sum().transpose();
            for (Index c = 0; c < q; ++c) neumaier(bm.sum(c), bm.sum_lo(c), csum(c));
            if (mode != Scatter::none) {
                const Vector cmean = csum / static_cast<double>(rows_now);
                RowMatrix centred = block.rowwise() - cmean.transpose();
                const double na = static_cast<double>(done);
                const double nb = static_cast<double>(rows_now);
                const Vector delta = cmean - bm.mean;
                const double w = na * nb / (na + nb);
                if (mode == Scatter::diagonal) {
                    bm.scatter_diag += centred.array().square().colwise().sum().transpose().matrix();
                    bm.scatter_diag += w * delta.array().square().matrix();
                } else {
                    bm.scatter.noalias() += centred.transpose() * centred;
                    bm.scatter.noalias() += w * delta * delta.transpose();
                }
                bm.mean += delta * (nb / (na + nb));
            }
            done += rows_now;
        }
        bm.count = count;
        bm.mean = (bm.sum + bm.sum_lo) / static_cast<double>(count);
        pricings_ += count * q;
        return bm;
    }

    static void neumaier(double& s, double& c, double x)
    {
        const double t = s + x;
        if (std::abs(s) >= std::abs(x))
            c += (s - t) + x;
        else
            c += (x - t) + s;
        s = t;
    }

private:
    struct Prepared {
        Vector mu;
        Vector scale;  // one-factor: per-scenario std
        Matrix L;      // factor mode: lower Cholesky factor
    };

    void detect_one_factor()
    {
        const Index n = theta_.size();
        sd_ = theta_.sigma.diagonal().cwiseMax(0.0).cwiseSqrt();
        if (n == 0) return;
        if (n == 1) {
            one_factor_ = true;
            rho_ = 0.0;
            return;
        }
        if (sd_.minCoeff() <= 0.0) {
            one_factor_ = theta_.sigma.isZero(0.0);
            rho_ = 0.0;
            return;
        }
        rho_ = theta_.sigma(1, 0) / (sd_(0) * sd_(1));
        if (!(rho_ >= 0.0 && rho_ < 1.0)) return;
        const double tol = 1e-12 * theta_.sigma.diagonal().maxCoeff();
        for (Index c = 0; c < n; ++c)
            for (Index r = c + 1; r < n; ++r)
                if (std::abs(theta_.sigma(r, c) - rho_ * sd_(r) * sd_(c)) > tol) return;
        one_factor_ = true;
    }

    Prepared prepare(const IndexList& idx) const
    {
        Prepared p;
        p.mu = restrict(theta_.mu, idx);
        if (one_factor_) {
            p.scale = restrict(sd_, idx);
            return p;
        }
        Matrix block = restrict(theta_.sigma, idx);
        Eigen::LLT<Matrix> llt(block);
        if (llt.info() == Eigen::Success) {
            p.L = llt.matrixL();
            return p;
        }
        Eigen::SelfAdjointEigenSolver<Matrix> es(block);
        const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
        if (es.eigenvalues().minCoeff() < -1e-10 * top)
            throw numerical_error("price source: covariance is not positive semi-definite");
        p.L = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
        return p;
    }

    void fill(const Prepared& p, RowMatrix& out, Rng& rng) const
    {
        const Index q = out.cols();
        if (one_factor_) {
            const double a = std::sqrt(rho_);
            const double b = std::sqrt(1.0 - rho_);
            for (Index r = 0; r < out.rows(); ++r) {
                const double common = a * rng.normal();
                for (Index c = 0; c < q; ++c) out(r, c) = p.mu(c) + p.scale(c) * (common + b * rng.normal());
            }
            return;
        }
        RowMatrix z(out.rows(), q);
        for (Index r = 0; r < out.rows(); ++r)
            for (Index c = 0; c < q; ++c) z(r, c) = rng.normal();
        out.noalias() = z * p.L.transpose();
        out.rowwise() += p.mu.transpose();
    }

    ScenarioParams theta_;
    Count chunk_scalars_;
    Vector sd_;
    double rho_ = 0.0;
    bool one_factor_ = false;
};

inline RowMatrix simulate_prices(const ScenarioParams& theta, Count count, Rng& rng)
{
    require(count >= 0, "simulate_prices: negative count");
    GaussianPriceSource src(theta);
    return src.rows(iota_indexes(theta.size()), count, rng);
}

} // namespace esscreen
