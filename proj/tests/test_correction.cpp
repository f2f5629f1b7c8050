#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "flowcal/correction.hpp"
#include "flowcal/oracle.hpp"
#include "flow_checks.hpp"
#include "helpers.hpp"
#include "toy_problem.hpp"

using namespace flowcal;

namespace {

// Small randomized-flow problem shared across cases.
struct Scene {
    BornLiteSurvey survey = make_survey(4, 4, 2, 2.0, 0.25, 2);
    double sigma = 0.4;
    ConditionalFlow flow = build_flow(16, 16, 3, 12, 8, 2.0, 3);
    Observation obs;

    explicit Scene(uint64_t seed = 5, bool randomize = true) {
        if (randomize) testutil::randomize_flow(flow, 71, 0.3);
        Rng rng(seed);
        const Tensor truth = rng.normal_tensor({4, 4});
        obs.shots = simulate_observation(truth, survey, NoiseModel{sigma, 1.0}, seed + 1);
        obs.rtm_image = rtm(survey, obs.shots);
    }
};

// Eq. 22 route: expectation of [-log p(z_corr | y) + log N(z_corr | mu, diag s^2)]
// with the Gaussian log-density expanded in full. The additive constant of
// the latent posterior cancels only in differences, which is what the
// Appendix-A check compares.
double loss_via_gaussian_logdensity(const Tensor& mu, const Tensor& log_s,
                                    const std::vector<Tensor>& zs, const Scene& sc) {
    const int64_t d = mu.numel();
    LatentCorrection c{mu, log_s};
    double acc = 0.0;
    for (const Tensor& z : zs) {
        const Tensor zc = c.apply(z);
        const double neg_log_post = -latent_log_posterior(zc, sc.obs, sc.flow, sc.survey, sc.sigma);
        double log_q = -0.5 * static_cast<double>(d) * std::log(2.0 * M_PI) - 0.5 * dot(z, z);
        for (int64_t i = 0; i < d; ++i) log_q -= log_s[i];
        acc += neg_log_post + log_q;
    }
    return acc / static_cast<double>(zs.size());
}

std::vector<int64_t> all_idx(int64_t n) {
    std::vector<int64_t> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
    return v;
}

} // namespace

TEST_CASE("latent log posterior anchors") {
    Scene sc;

    SECTION("noise-free consistent z scores exactly -|z|^2/2") {
        Rng rng(8);
        const Tensor z = rng.normal_tensor({16});
        const Tensor x = flow_inverse(sc.flow, z, sc.obs.rtm_image).reshaped({4, 4});
        Observation clean;
        clean.rtm_image = sc.obs.rtm_image;
        for (int64_t i = 0; i < 2; ++i) clean.shots.push_back(born_lite_forward(sc.survey, i, x));
        const double v = latent_log_posterior(z, clean, sc.flow, sc.survey, sc.sigma);
        REQUIRE(v == Catch::Approx(-0.5 * dot(z, z)).margin(1e-12));
    }

    SECTION("doubling sigma quarters the misfit weight") {
        Rng rng(9);
        const Tensor z = rng.normal_tensor({16});
        const double prior = -0.5 * dot(z, z);
        const double v1 = latent_log_posterior(z, sc.obs, sc.flow, sc.survey, sc.sigma);
        const double v2 = latent_log_posterior(z, sc.obs, sc.flow, sc.survey, 2.0 * sc.sigma);
        REQUIRE((v1 - prior) == Catch::Approx(4.0 * (v2 - prior)).epsilon(1e-12));
    }

    SECTION("identity flow matches the dense-oracle posterior up to a constant") {
        const testutil::ToyProblem toy = testutil::make_toy(4, 4, 2, 0.5);
        Rng rng(10);
        const Tensor truth = rng.normal_tensor({4, 4});
        Observation obs;
        obs.shots = simulate_observation(truth, toy.survey, toy.noise, 11);
        obs.rtm_image = rtm(toy.survey, obs.shots);
        const GaussianDist post = toy.posterior_for(obs.shots);
        const ConditionalFlow identity = build_flow(16, 16, 2, 8, 8, 2.0, 12);

        Eigen::MatrixXd cov(16, 16);
        for (int64_t r = 0; r < 16; ++r)
            for (int64_t c = 0; c < 16; ++c) cov(r, c) = post.cov.at(r, c);
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        auto post_quad = [&](const Tensor& z) {
            Eigen::VectorXd dz(16);
            for (int64_t i = 0; i < 16; ++i) dz[i] = z[i] - post.mean[i];
            return -0.5 * dz.dot(llt.solve(dz));
        };
        const Tensor z1 = rng.normal_tensor({16});
        const Tensor z2 = rng.normal_tensor({16});
        const double lhs = latent_log_posterior(z1, obs, identity, toy.survey, 0.5) -
                           latent_log_posterior(z2, obs, identity, toy.survey, 0.5);
        const double rhs = post_quad(z1) - post_quad(z2);
        REQUIRE(lhs == Catch::Approx(rhs).margin(1e-9));
    }

    SECTION("subset rescaling is unbiased over the index set") {
        Rng rng(13);
        const Tensor z = rng.normal_tensor({16});
        const double full = latent_log_posterior(z, sc.obs, sc.flow, sc.survey, sc.sigma);
        std::vector<int64_t> s0 = {0}, s1 = {1};
        const double m0 = latent_log_posterior(z, sc.obs, sc.flow, sc.survey, sc.sigma, &s0);
        const double m1 = latent_log_posterior(z, sc.obs, sc.flow, sc.survey, sc.sigma, &s1);
        const double prior = -0.5 * dot(z, z);
        REQUIRE(((m0 - prior) + (m1 - prior)) / 2.0 + prior == Catch::Approx(full).margin(1e-10));
    }

    SECTION("sigma must be positive") {
        REQUIRE_THROWS_AS(latent_log_posterior(Tensor({16}), sc.obs, sc.flow, sc.survey, 0.0),
                          ValidationError);
    }
}

TEST_CASE("correction loss identities") {
    Scene sc;
    Rng rng(21);

    SECTION("mu=0, s=1 reduces to the negative latent log posterior") {
        const Tensor mu({16}), log_s({16});
        for (int trial = 0; trial < 5; ++trial) {
            const Tensor z = rng.normal_tensor({16});
            const double loss =
                correction_loss(mu, log_s, {z}, all_idx(2), sc.obs, sc.flow, sc.survey, sc.sigma);
            const double llp = latent_log_posterior(z, sc.obs, sc.flow, sc.survey, sc.sigma);
            REQUIRE(loss == Catch::Approx(-llp).margin(1e-10));
        }
    }

    SECTION("entropy term is exactly minus the sum of log scales") {
        // z = 0 makes z_corr = mu regardless of s, isolating the entropy term
        const Tensor z({16});
        const Tensor mu = rng.normal_tensor({16});
        Tensor log_s({16});
        const double base =
            correction_loss(mu, log_s, {z}, all_idx(2), sc.obs, sc.flow, sc.survey, sc.sigma);
        for (int64_t i = 0; i < 16; ++i) log_s[i] = rng.uniform(-1.0, 1.0);
        const double shifted =
            correction_loss(mu, log_s, {z}, all_idx(2), sc.obs, sc.flow, sc.survey, sc.sigma);
        double sum_ls = 0.0;
        for (int64_t i = 0; i < 16; ++i) sum_ls += log_s[i];
        REQUIRE(shifted - base == Catch::Approx(-sum_ls).margin(1e-10));
    }

    SECTION("s = (2, 2) on a zero-misfit construction contributes -2 log 2") {
        BornLiteSurvey mini = make_survey(2, 1, 1, 1e6, 0.25, 1);
        mini.kernel = Tensor::from({1}, {1.0});
        mini.half_width = 0;
        const ConditionalFlow identity = build_flow(2, 2, 1, 4, 2, 2.0, 31);
        const Tensor z = Tensor::from({2}, {0.3, -0.8});
        Tensor log_s = Tensor::full({2}, std::log(2.0));
        const Tensor mu = Tensor::from({2}, {0.1, 0.2});
        const Tensor zc = LatentCorrection{mu, log_s}.apply(z);
        Observation obs;
        obs.rtm_image = Tensor({2, 1});
        obs.shots = {born_lite_forward(mini, 0, zc.reshaped({2, 1}))}; // misfit(zc) = 0
        const double loss = correction_loss(mu, log_s, {z}, all_idx(1), obs, identity, mini, 1.0);
        REQUIRE(loss ==
                Catch::Approx(0.5 * dot(zc, zc) - 2.0 * std::log(2.0)).margin(1e-12));
    }

    SECTION("appendix equivalence: objective differences agree between routes") {
        Rng zr(33);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<Tensor> zs;
            for (int k = 0; k < 3; ++k) zs.push_back(zr.normal_tensor({16}));
            const Tensor mu1 = zr.normal_tensor({16});
            const Tensor mu2 = zr.normal_tensor({16});
            Tensor ls1({16}), ls2({16});
            for (int64_t i = 0; i < 16; ++i) {
                ls1[i] = zr.uniform(-0.7, 0.7);
                ls2[i] = zr.uniform(-0.7, 0.7);
            }
            const auto idx = all_idx(2);
            const double d25 =
                correction_loss(mu1, ls1, zs, idx, sc.obs, sc.flow, sc.survey, sc.sigma) -
                correction_loss(mu2, ls2, zs, idx, sc.obs, sc.flow, sc.survey, sc.sigma);
            const double d22 = loss_via_gaussian_logdensity(mu1, ls1, zs, sc) -
                               loss_via_gaussian_logdensity(mu2, ls2, zs, sc);
            REQUIRE(d25 == Catch::Approx(d22).margin(1e-8));
        }
    }
}

TEST_CASE("correction tape matches the numeric loss and finite differences") {
    Scene sc;
    detail::CorrectionGraph cg(&sc.flow, sc.obs, sc.survey, sc.sigma, /*z_batch=*/2,
                               /*prior_std=*/1.0, nullptr);
    Rng rng(41);
    const Tensor z = rng.normal_tensor({2, 16});
    cg.g.bind("z", z);
    cg.g.bind("w", Tensor::full({2}, 1.0)); // full misfit

    SECTION("value equality against the numeric route") {
        Tensor mu = rng.normal_tensor({1, 16});
        Tensor log_s({1, 16});
        for (int64_t i = 0; i < 16; ++i) log_s[i] = rng.uniform(-0.5, 0.5);
        cg.g.param_value(cg.mu) = mu;
        cg.g.param_value(cg.log_s) = log_s;
        cg.g.forward();
        std::vector<Tensor> zrows;
        for (int64_t b = 0; b < 2; ++b) {
            Tensor row({16});
            for (int64_t i = 0; i < 16; ++i) row[i] = z[b * 16 + i];
            zrows.push_back(std::move(row));
        }
        const double numeric =
            correction_loss(mu.reshaped({16}), log_s.reshaped({16}), zrows, all_idx(2), sc.obs,
                            sc.flow, sc.survey, sc.sigma);
        REQUIRE(cg.g.value(cg.loss)[0] == Catch::Approx(numeric).margin(1e-10));
    }

    SECTION("gradient at the initialization matches finite differences") {
        REQUIRE(testutil::graph_gradcheck(cg.g, cg.loss) < 1e-5);
    }
}

TEST_CASE("identity-flow correction recovers the oracle diagonal fit") {
    // dense linear-Gaussian problem, D = 16
    const int64_t nz = 4, nx = 4, n_src = 2;
    BornLiteSurvey survey = make_survey(nz, nx, n_src, 2.0, 0.25, 2);
    const double sigma = 0.35;
    DenseGaussianProblem dense;
    dense.J = assemble_dense_operator(survey);
    dense.sigma = sigma;
    dense.prior_mean = Tensor({16});
    dense.prior_cov = Tensor({16, 16});
    for (int64_t i = 0; i < 16; ++i) dense.prior_cov.at(i, i) = 1.0;

    Rng rng(42);
    const Tensor truth = rng.normal_tensor({nz, nx});
    Observation obs;
    obs.shots = simulate_observation(truth, survey, NoiseModel{sigma, 1.0}, 5);
    obs.rtm_image = rtm(survey, obs.shots);

    const GaussianDist post = analytic_posterior(dense, stack_shots(obs.shots));
    const DiagFit fit = reverse_kl_diag_fit(post);

    const ConditionalFlow identity = build_flow(16, 16, 4, 8, 8, 2.0, 1);
    CorrectionConfig cfg;
    cfg.epochs = 1000; // 2000 iterations over n_src = 2
    cfg.stepsize = 0.08;
    cfg.decay_factor = 0.7;
    cfg.decay_every = 60;
    cfg.z_batch = 32;
    cfg.seed = 9;
    const CorrectionResult res = train_correction(identity, obs, survey, sigma, cfg);
    REQUIRE_FALSE(res.diverged);
    REQUIRE(res.loss_log.size() == 2000);

    REQUIRE(max_abs_diff(res.corr.mu, fit.mean) < 1e-2);
    const Tensor s = res.corr.scale();
    for (int64_t i = 0; i < 16; ++i)
        REQUIRE(std::abs(s[i] - fit.scale[i]) / fit.scale[i] < 0.05);

    // monotone improvement on a held-out z batch
    std::vector<Tensor> held;
    Rng hz(77);
    for (int k = 0; k < 64; ++k) held.push_back(hz.normal_tensor({16}));
    const Tensor zero({16});
    const double before = correction_loss(zero, zero, held, all_idx(2), obs, identity, survey, sigma);
    const double after = correction_loss(res.corr.mu, res.corr.log_s, held, all_idx(2), obs,
                                         identity, survey, sigma);
    REQUIRE(after < before);
}

TEST_CASE("zero-iteration correction is the identity") {
    Scene sc;
    CorrectionConfig cfg;
    cfg.epochs = 0;
    const CorrectionResult res = train_correction(sc.flow, sc.obs, sc.survey, sc.sigma, cfg);
    REQUIRE(res.loss_log.empty());
    REQUIRE(max_abs(res.corr.mu) == 0.0);
    REQUIRE(max_abs(res.corr.log_s) == 0.0);
}

TEST_CASE("stepsize schedule decays by the factor at the stated cadence") {
    CorrectionConfig cfg;
    cfg.stepsize = 0.1;
    cfg.decay_factor = 0.9;
    cfg.decay_every = 2;
    REQUIRE(cfg.stepsize_at(0) == 0.1);
    REQUIRE(cfg.stepsize_at(1) == 0.1);
    REQUIRE(cfg.stepsize_at(2) == Catch::Approx(0.09));
    REQUIRE(cfg.stepsize_at(3) == Catch::Approx(0.09));
    REQUIRE(cfg.stepsize_at(4) == Catch::Approx(0.081));
}

TEST_CASE("mean-field VI on the scalar conjugate problem") {
    // y = 2x + eps, sigma = 1, prior N(0, 1): posterior N(2y/5, 1/5)
    BornLiteSurvey line = make_survey(1, 1, 1, 1e6, 0.25, 1);
    line.kernel = Tensor::from({1}, {2.0});
    line.half_width = 0;
    const double y = 1.3;
    Observation obs;
    obs.shots = {Tensor::from({1, 1}, {y})};
    obs.rtm_image = Tensor({1, 1});

    CorrectionConfig cfg;
    cfg.epochs = 3000;
    cfg.stepsize = 0.05;
    cfg.decay_factor = 0.75;
    cfg.decay_every = 150;
    cfg.z_batch = 32;
    cfg.seed = 2;
    const CorrectionResult res = meanfield_vi(obs, line, 1.0, Tensor({1}), 1.0, cfg);
    REQUIRE(res.corr.mu[0] == Catch::Approx(2.0 * y / 5.0).margin(0.02));
    REQUIRE(std::exp(res.corr.log_s[0]) == Catch::Approx(1.0 / std::sqrt(5.0)).epsilon(0.05));
}

TEST_CASE("mean-field VI with zero data is symmetric around zero") {
    BornLiteSurvey line = make_survey(1, 1, 1, 1e6, 0.25, 1);
    line.kernel = Tensor::from({1}, {1.0});
    line.half_width = 0;
    Observation obs;
    obs.shots = {Tensor({1, 1})};
    obs.rtm_image = Tensor({1, 1});
    CorrectionConfig cfg;
    cfg.epochs = 2000;
    cfg.stepsize = 0.05;
    cfg.decay_factor = 0.8;
    cfg.decay_every = 100;
    cfg.z_batch = 32;
    cfg.seed = 3;
    const CorrectionResult res = meanfield_vi(obs, line, 1.0, Tensor({1}), 1.0, cfg);
    REQUIRE(std::abs(res.corr.mu[0]) < 0.02);
}

TEST_CASE("mean-field VI equals identity-flow correction bit for bit") {
    const testutil::ToyProblem toy = testutil::make_toy(2, 2, 2, 0.5);
    Rng rng(61);
    const Tensor truth = rng.normal_tensor({2, 2});
    Observation obs;
    obs.shots = simulate_observation(truth, toy.survey, toy.noise, 62);
    obs.rtm_image = rtm(toy.survey, obs.shots);

    CorrectionConfig cfg;
    cfg.epochs = 40;
    cfg.z_batch = 2;
    cfg.seed = 63;
    const ConditionalFlow identity = build_flow(4, 4, 2, 8, 4, 2.0, 64);
    const CorrectionResult a = train_correction(identity, obs, toy.survey, 0.5, cfg);
    const CorrectionResult b = meanfield_vi(obs, toy.survey, 0.5, Tensor({4}), 1.0, cfg);
    REQUIRE(a.loss_log == b.loss_log);
    for (int64_t i = 0; i < 4; ++i) {
        REQUIRE(a.corr.mu[i] == b.corr.mu[i]);
        REQUIRE(a.corr.log_s[i] == b.corr.log_s[i]);
    }
}

TEST_CASE("correction blob round trip and corruption handling") {
    Rng rng(71);
    LatentCorrection c;
    c.mu = rng.normal_tensor({9});
    c.log_s = rng.normal_tensor({9});
    const std::vector<uint8_t> bytes = correction_to_bytes(c);
    const LatentCorrection back = correction_from_bytes(bytes);
    REQUIRE(max_abs_diff(back.mu, c.mu) == 0.0);
    REQUIRE(max_abs_diff(back.log_s, c.log_s) == 0.0);

    std::vector<uint8_t> cut(bytes.begin(), bytes.begin() + 20);
    REQUIRE_THROWS_AS(correction_from_bytes(cut), IoError);
    std::vector<uint8_t> bad = bytes;
    bad[4] = 9;
    REQUIRE_THROWS_AS(correction_from_bytes(bad), IoError);
    std::vector<uint8_t> magic = bytes;
    magic[0] = 'Y';
    REQUIRE_THROWS_AS(correction_from_bytes(magic), IoError);
}
