#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "flowcal/adam.hpp"
#include "flowcal/oracle.hpp"
#include "flowcal/physics.hpp"
#include "flowcal/rng.hpp"
#include "random_graphs.hpp"

using namespace flowcal;

namespace {

Tensor identity_matrix(int64_t d) {
    Tensor m({d, d});
    for (int64_t i = 0; i < d; ++i) m.at(i, i) = 1.0;
    return m;
}

GaussianDist random_pd_target(int64_t d, Rng& rng) {
    Eigen::MatrixXd a(d, d);
    for (int64_t r = 0; r < d; ++r)
        for (int64_t c = 0; c < d; ++c) a(r, c) = rng.normal();
    const Eigen::MatrixXd cov = a * a.transpose() + 0.3 * Eigen::MatrixXd::Identity(d, d);
    GaussianDist g;
    g.mean = testutil::random_tensor({d}, rng);
    g.cov = Tensor({d, d});
    for (int64_t r = 0; r < d; ++r)
        for (int64_t c = 0; c < d; ++c) g.cov.at(r, c) = cov(r, c);
    return g;
}

double gaussian_logpdf(const GaussianDist& g, const Tensor& x) {
    const int64_t d = g.dim();
    Eigen::MatrixXd cov(d, d);
    for (int64_t r = 0; r < d; ++r)
        for (int64_t c = 0; c < d; ++c) cov(r, c) = g.cov.at(r, c);
    Eigen::VectorXd dx(d);
    for (int64_t i = 0; i < d; ++i) dx[i] = x[i] - g.mean[i];
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const Eigen::MatrixXd l = llt.matrixL();
    double logdet = 0.0;
    for (int64_t i = 0; i < d; ++i) logdet += 2.0 * std::log(l(i, i));
    const double quad = dx.dot(llt.solve(dx));
    return -0.5 * (static_cast<double>(d) * std::log(2.0 * M_PI) + logdet + quad);
}

} // namespace

TEST_CASE("dense operator matches the live forward and adjoint") {
    const BornLiteSurvey s = make_survey(8, 8, 2, 3.0, 0.2, 4);
    const Tensor jmat = assemble_dense_operator(s);
    Rng rng(31);

    SECTION("J vec(x) equals stacked forward outputs to 1e-12") {
        const Tensor x = testutil::random_tensor({8, 8}, rng);
        std::vector<Tensor> shots;
        for (int64_t i = 0; i < 2; ++i) shots.push_back(born_lite_forward(s, i, x));
        const Tensor stacked = stack_shots(shots);
        Tensor jx({jmat.dim(0)});
        for (int64_t r = 0; r < jmat.dim(0); ++r) {
            double acc = 0.0;
            for (int64_t k = 0; k < 64; ++k) acc += jmat.at(r, k) * x[k];
            jx[r] = acc;
        }
        REQUIRE(max_abs_diff(jx, stacked) < 1e-12);
    }

    SECTION("size guard") {
        REQUIRE_THROWS_AS(assemble_dense_operator(make_survey(128, 64, 1)), ValidationError);
    }

    SECTION("tiny taper width zeroes rows away from source columns") {
        BornLiteSurvey narrow = make_survey(8, 8, 2, /*taper_len=*/1e-3, 0.2, 4);
        const Tensor jn = assemble_dense_operator(narrow);
        // columns of the model under a source stay live, others vanish
        for (int64_t r = 0; r < jn.dim(0); ++r)
            for (int64_t k = 0; k < 64; ++k) {
                const int64_t model_col = k % 8;
                const bool under_source = model_col == narrow.source_cols[0] ||
                                          model_col == narrow.source_cols[1];
                if (!under_source) REQUIRE(std::abs(jn.at(r, k)) < 1e-200);
            }
    }
}

TEST_CASE("analytic posterior closed forms") {
    SECTION("identity operator, unit prior, zero data halves the covariance") {
        const int64_t d = 4;
        DenseGaussianProblem p;
        p.J = identity_matrix(d);
        p.sigma = 1.0;
        p.prior_mean = Tensor({d});
        p.prior_cov = identity_matrix(d);
        const GaussianDist post = analytic_posterior(p, Tensor({d}));
        REQUIRE(max_abs(post.mean) == 0.0);
        for (int64_t r = 0; r < d; ++r)
            for (int64_t c = 0; c < d; ++c)
                REQUIRE(post.cov.at(r, c) == Catch::Approx(r == c ? 0.5 : 0.0).margin(1e-12));
    }

    SECTION("zero operator returns the prior exactly") {
        const int64_t d = 3;
        DenseGaussianProblem p;
        p.J = Tensor({5, d});
        p.sigma = 0.7;
        Rng rng(8);
        p.prior_mean = testutil::random_tensor({d}, rng);
        p.prior_cov = identity_matrix(d);
        p.prior_cov.at(0, 0) = 2.0;
        const GaussianDist post = analytic_posterior(p, Tensor({5}));
        REQUIRE(max_abs_diff(post.mean, p.prior_mean) < 1e-12);
        REQUIRE(max_abs_diff(post.cov, p.prior_cov) < 1e-12);
    }

    SECTION("scalar conjugate case y = 2x + eps") {
        DenseGaussianProblem p;
        p.J = Tensor::from({1, 1}, {2.0});
        p.sigma = 1.0;
        p.prior_mean = Tensor({1});
        p.prior_cov = Tensor::from({1, 1}, {1.0});
        const GaussianDist post = analytic_posterior(p, Tensor::from({1}, {5.0}));
        REQUIRE(post.mean[0] == Catch::Approx(2.0).margin(1e-12)); // 2*5/5
        REQUIRE(post.cov.at(0, 0) == Catch::Approx(0.2).margin(1e-12));
    }

    SECTION("posterior mean is a stationary point of the negative log posterior") {
        const BornLiteSurvey s = make_survey(6, 6, 2, 2.0, 0.2, 3);
        DenseGaussianProblem p;
        p.J = assemble_dense_operator(s);
        p.sigma = 0.4;
        p.prior_mean = Tensor({36});
        p.prior_cov = identity_matrix(36);
        Rng rng(17);
        const Tensor y = testutil::random_tensor({p.J.dim(0)}, rng);
        const GaussianDist post = analytic_posterior(p, y);
        // grad = J^T (J m - y) / sigma^2 + Sigma0^-1 (m - m0)
        Tensor grad({36});
        const double inv_s2 = 1.0 / (p.sigma * p.sigma);
        for (int64_t k = 0; k < 36; ++k) {
            double acc = 0.0;
            for (int64_t r = 0; r < p.J.dim(0); ++r) {
                double jm = 0.0;
                for (int64_t c = 0; c < 36; ++c) jm += p.J.at(r, c) * post.mean[c];
                acc += p.J.at(r, k) * (jm - y[r]);
            }
            grad[k] = acc * inv_s2 + post.mean[k];
        }
        REQUIRE(norm2(grad) < 1e-8);
    }
}

TEST_CASE("gaussian KL closed form") {
    SECTION("KL(p, p) = 0") {
        Rng rng(12);
        const GaussianDist p = random_pd_target(3, rng);
        REQUIRE(std::abs(kl_gauss(p, p)) < 1e-10);
    }

    SECTION("unit-variance mean shift gives mu^2/2") {
        GaussianDist p{Tensor({1}), Tensor::from({1, 1}, {1.0})};
        GaussianDist q{Tensor::from({1}, {1.0}), Tensor::from({1, 1}, {1.0})};
        REQUIRE(kl_gauss(p, q) == Catch::Approx(0.5).margin(1e-12));
    }

    SECTION("matches a Monte-Carlo estimate within 1 percent") {
        Rng rng(13);
        const GaussianDist p = random_pd_target(2, rng);
        const GaussianDist q = random_pd_target(2, rng);
        const double exact = kl_gauss(p, q);
        double acc = 0.0;
        const int64_t n = 1000000;
        for (int64_t i = 0; i < n; ++i) {
            const Tensor x = sample_gaussian(p, rng);
            acc += gaussian_logpdf(p, x) - gaussian_logpdf(q, x);
        }
        const double mc = acc / static_cast<double>(n);
        REQUIRE(mc == Catch::Approx(exact).epsilon(0.01));
    }

    SECTION("singular q rejected") {
        GaussianDist p{Tensor({2}), identity_matrix(2)};
        GaussianDist q{Tensor({2}), Tensor({2, 2})};
        REQUIRE_THROWS_AS(kl_gauss(p, q), ValidationError);
    }
}

TEST_CASE("reverse-KL diagonal fit") {
    SECTION("diagonal target recovers its own scales") {
        GaussianDist t{Tensor({3}), Tensor({3, 3})};
        t.cov.at(0, 0) = 4.0;
        t.cov.at(1, 1) = 0.25;
        t.cov.at(2, 2) = 1.0;
        const DiagFit fit = reverse_kl_diag_fit(t);
        REQUIRE(fit.scale[0] == Catch::Approx(2.0).margin(1e-12));
        REQUIRE(fit.scale[1] == Catch::Approx(0.5).margin(1e-12));
        REQUIRE(fit.scale[2] == Catch::Approx(1.0).margin(1e-12));
    }

    SECTION("correlated pair contracts by sqrt(1 - rho^2)") {
        GaussianDist t{Tensor({2}), Tensor({2, 2})};
        t.cov.at(0, 0) = 1.0;
        t.cov.at(1, 1) = 1.0;
        t.cov.at(0, 1) = 0.8;
        t.cov.at(1, 0) = 0.8;
        const DiagFit fit = reverse_kl_diag_fit(t);
        REQUIRE(fit.scale[0] == Catch::Approx(0.6).margin(1e-12));
        REQUIRE(fit.scale[1] == Catch::Approx(0.6).margin(1e-12));
    }

    SECTION("matches direct minimization of the Gaussian KL on random targets") {
        Rng rng(14);
        for (int trial = 0; trial < 20; ++trial) {
            const int64_t d = 2 + static_cast<int64_t>(rng.below(7)); // up to 8
            const GaussianDist target = random_pd_target(d, rng);
            const DiagFit closed = reverse_kl_diag_fit(target);

            Eigen::MatrixXd cov(d, d);
            for (int64_t r = 0; r < d; ++r)
                for (int64_t c = 0; c < d; ++c) cov(r, c) = target.cov.at(r, c);
            const Eigen::MatrixXd prec = cov.llt().solve(Eigen::MatrixXd::Identity(d, d));

            // Adam on the analytic KL gradient from a random start:
            //   dKL/dmu = Prec (mu - mean),  dKL/ds_d = Prec_dd s_d - 1/s_d.
            Tensor mu = testutil::random_tensor({d}, rng);
            Tensor s = Tensor::full({d}, 1.0);
            AdamState st = AdamState::for_params({&mu, &s});
            for (int it = 0; it < 6000; ++it) {
                Tensor gmu({d}), gs({d});
                for (int64_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < d; ++j) acc += prec(i, j) * (mu[j] - target.mean[j]);
                    gmu[i] = acc;
                    gs[i] = prec(i, i) * s[i] - 1.0 / s[i];
                }
                adam_step({&mu, &s}, {&gmu, &gs}, st, it < 3000 ? 0.02 : 0.002);
            }
            REQUIRE(max_abs_diff(mu, closed.mean) < 1e-3);
            REQUIRE(max_abs_diff(s, closed.scale) < 1e-3);
        }
    }

    SECTION("singular target rejected") {
        GaussianDist t{Tensor({2}), Tensor({2, 2})};
        REQUIRE_THROWS_AS(reverse_kl_diag_fit(t), ValidationError);
    }
}
