#pragma once

// Exact linear-Gaussian ground truth: dense operator assembly, conjugate
// analytic posterior, closed-form Gaussian KL, and the closed-form
// reverse-KL diagonal fit. This is the verification backbone; it goes
// through Eigen so its linear algebra is independent of the hand-written
// operators it checks.

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "flowcal/physics.hpp"
#include "flowcal/rng.hpp"
#include "flowcal/tensor.hpp"

namespace flowcal {

namespace detail {

inline Eigen::Map<const Eigen::VectorXd> as_vec(const Tensor& t) {
    return {t.data(), t.numel()};
}

inline Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
as_mat(const Tensor& t) {
    return {t.data(), t.dim(0), t.dim(1)};
}

inline Tensor from_vec(const Eigen::VectorXd& v) {
    Tensor t({static_cast<int64_t>(v.size())});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = v[i];
    return t;
}

inline Tensor from_mat(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<int64_t>(m.rows()), static_cast<int64_t>(m.cols())});
    for (int64_t r = 0; r < t.dim(0); ++r)
        for (int64_t c = 0; c < t.dim(1); ++c) t.at(r, c) = m(r, c);
    return t;
}

} // namespace detail

struct GaussianDist {
    Tensor mean; // [D]
    Tensor cov;  // [D, D]

    int64_t dim() const { return mean.numel(); }
};

struct DenseGaussianProblem {
    Tensor J;          // [rows, D]: all data samples across sources, stacked
    double sigma = 1.0;
    Tensor prior_mean; // [D]
    Tensor prior_cov;  // [D, D], symmetric positive definite
};

// Stacks shot panels in source order, row-major per panel; matches the row
// layout of assemble_dense_operator.
inline Tensor stack_shots(const std::vector<Tensor>& shots) {
    int64_t rows = 0;
    for (const Tensor& s : shots) rows += s.numel();
    Tensor out({rows});
    int64_t at = 0;
    for (const Tensor& s : shots)
        for (int64_t i = 0; i < s.numel(); ++i) out[at++] = s[i];
    return out;
}

// Materializes the Born-lite map column by column: column k is the stacked
// forward response of the k-th basis image.
inline Tensor assemble_dense_operator(const BornLiteSurvey& s) {
    const int64_t d = s.nz * s.nx;
    if (d > 4096) throw ValidationError("assemble_dense_operator: grid too large (nz*nx > 4096)");
    const int64_t rows = s.n_sources * s.nz * s.n_receivers();
    Tensor jmat({rows, d});
    Tensor basis({s.nz, s.nx});
    for (int64_t k = 0; k < d; ++k) {
        basis[k] = 1.0;
        int64_t r = 0;
        for (int64_t i = 0; i < s.n_sources; ++i) {
            const Tensor di = born_lite_forward(s, i, basis);
            for (int64_t e = 0; e < di.numel(); ++e) jmat.at(r++, k) = di[e];
        }
        basis[k] = 0.0;
    }
    return jmat;
}

// Conjugate Gaussian posterior: Sigma = (J^T J / sigma^2 + Sigma0^-1)^-1,
// mean = Sigma (J^T y / sigma^2 + Sigma0^-1 m0). Solved via LLT.
inline GaussianDist analytic_posterior(const DenseGaussianProblem& p, const Tensor& y) {
    const auto J = detail::as_mat(p.J);
    const auto yv = detail::as_vec(y);
    const auto m0 = detail::as_vec(p.prior_mean);
    const auto cov0 = detail::as_mat(p.prior_cov);
    if (!(p.sigma > 0.0)) throw ValidationError("analytic_posterior: sigma must be > 0");
    if (y.numel() != p.J.dim(0))
        throw ValidationError("analytic_posterior: data length does not match operator rows");

    Eigen::LLT<Eigen::MatrixXd> llt0(cov0);
    if (llt0.info() != Eigen::Success)
        throw ValidationError("analytic_posterior: prior covariance is not positive definite");
    const int64_t d = p.prior_mean.numel();
    const Eigen::MatrixXd prior_prec = llt0.solve(Eigen::MatrixXd::Identity(d, d));

    const double inv_s2 = 1.0 / (p.sigma * p.sigma);
    const Eigen::MatrixXd precision = J.transpose() * J * inv_s2 + prior_prec;
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success)
        throw ValidationError("analytic_posterior: posterior precision factorization failed");
    const Eigen::VectorXd rhs = J.transpose() * yv * inv_s2 + prior_prec * m0;
    GaussianDist out;
    out.mean = detail::from_vec(llt.solve(rhs));
    out.cov = detail::from_mat(llt.solve(Eigen::MatrixXd::Identity(d, d)));
    return out;
}

// KL(N_p || N_q) in closed form.
inline double kl_gauss(const GaussianDist& p, const GaussianDist& q) {
    if (p.dim() != q.dim()) throw ValidationError("kl_gauss: dimension mismatch");
    const int64_t d = p.dim();
    const auto cp = detail::as_mat(p.cov);
    const auto cq = detail::as_mat(q.cov);
    Eigen::LLT<Eigen::MatrixXd> lltq(cq);
    if (lltq.info() != Eigen::Success) throw ValidationError("kl_gauss: q covariance is singular");
    Eigen::LLT<Eigen::MatrixXd> lltp(cp);
    const Eigen::VectorXd dm = detail::as_vec(q.mean) - detail::as_vec(p.mean);
    const double trace_term = lltq.solve(Eigen::MatrixXd(cp)).trace();
    const double quad = dm.dot(lltq.solve(dm));
    const Eigen::MatrixXd lq = lltq.matrixL();
    double logdet_q = 0.0;
    for (int64_t i = 0; i < d; ++i) logdet_q += 2.0 * std::log(lq(i, i));
    double logdet_p;
    if (lltp.info() == Eigen::Success) {
        const Eigen::MatrixXd lp = lltp.matrixL();
        logdet_p = 0.0;
        for (int64_t i = 0; i < d; ++i) logdet_p += 2.0 * std::log(lp(i, i));
    } else {
        // Semi-definite p still has a well-defined KL only when supported
        // inside q; fall back to LU for the (possibly -inf) log-determinant.
        logdet_p = std::log(Eigen::MatrixXd(cp).determinant());
    }
    return 0.5 * (trace_term + quad - static_cast<double>(d) + logdet_q - logdet_p);
}

struct DiagFit {
    Tensor mean;  // [D]
    Tensor scale; // [D], strictly positive
};

// Minimizer of KL(N(mu, diag(s)^2) || target) for Gaussian targets:
// mu = target mean, s_d = 1 / sqrt((Sigma^-1)_dd).
inline DiagFit reverse_kl_diag_fit(const GaussianDist& target) {
    const auto cov = detail::as_mat(target.cov);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
        throw ValidationError("reverse_kl_diag_fit: target covariance is singular");
    const int64_t d = target.dim();
    const Eigen::MatrixXd prec = llt.solve(Eigen::MatrixXd::Identity(d, d));
    DiagFit fit;
    fit.mean = target.mean;
    fit.scale = Tensor({d});
    for (int64_t i = 0; i < d; ++i) fit.scale[i] = 1.0 / std::sqrt(prec(i, i));
    return fit;
}

// Draws one sample mean + L z with the lower Cholesky factor of cov.
inline Tensor sample_gaussian(const GaussianDist& g, Rng& rng) {
    Eigen::LLT<Eigen::MatrixXd> llt(Eigen::MatrixXd(detail::as_mat(g.cov)));
    if (llt.info() != Eigen::Success) throw ValidationError("sample_gaussian: covariance not PD");
    const Eigen::MatrixXd L = llt.matrixL();
    const int64_t d = g.dim();
    Eigen::VectorXd z(d);
    for (int64_t i = 0; i < d; ++i) z[i] = rng.normal();
    return detail::from_vec(detail::as_vec(g.mean) + L * z);
}

// Gaussian moment fit of an ensemble of [D] samples (n-1 denominator).
inline GaussianDist fit_gaussian(const std::vector<Tensor>& samples) {
    if (samples.size() < 2) throw ValidationError("fit_gaussian: need at least 2 samples");
    const int64_t d = samples[0].numel();
    const int64_t n = static_cast<int64_t>(samples.size());
    GaussianDist g;
    g.mean = Tensor({d});
    for (const Tensor& s : samples)
        for (int64_t i = 0; i < d; ++i) g.mean[i] += s[i];
    for (int64_t i = 0; i < d; ++i) g.mean[i] /= static_cast<double>(n);
    g.cov = Tensor({d, d});
    for (const Tensor& s : samples)
        for (int64_t r = 0; r < d; ++r) {
            const double dr = s[r] - g.mean[r];
            for (int64_t c = 0; c < d; ++c) g.cov.at(r, c) += dr * (s[c] - g.mean[c]);
        }
    for (int64_t i = 0; i < d * d; ++i) g.cov[i] /= static_cast<double>(n - 1);
    return g;
}

} // namespace flowcal
