#pragma once

// Physics-based diagonal latent-distribution correction.
//
// The shifted latent posterior is, up to a constant,
//   -log p(z | y_obs) = 1/(2 sigma^2) sum_i |y_obs,i - F_i(f_phi^-1(z; y))|^2
//                       + |z|^2 / 2,
// and the correction fits N(mu, diag(s)^2) to it by reverse KL. With the
// reparameterization z_corr = s .* z + mu, z ~ N(0, I), the objective is
//   E_z[ misfit(z_corr) + |z_corr|^2 / 2 ] - sum_d log s_d,
// the entropy term being exact for a diagonal Gaussian. s is optimized as
// log s so positivity never needs clamping. The transport direction is the
// flow inverse (latent to model space), matching the corrected sampling
// rule x = f_phi^-1(s .* z + mu; y_obs).

#include <cstdint>
#include <optional>
#include <vector>

#include "flowcal/adam.hpp"
#include "flowcal/autodiff.hpp"
#include "flowcal/flow.hpp"
#include "flowcal/io.hpp"
#include "flowcal/physics.hpp"
#include "flowcal/rng.hpp"

namespace flowcal {

struct LatentCorrection {
    Tensor mu;    // [D]
    Tensor log_s; // [D]; s = exp(log_s) > 0 always

    static LatentCorrection identity(int64_t dim) {
        LatentCorrection c;
        c.mu = Tensor({dim});
        c.log_s = Tensor({dim});
        return c;
    }

    int64_t dim() const { return mu.numel(); }

    Tensor scale() const {
        Tensor s(log_s.shape());
        for (int64_t i = 0; i < s.numel(); ++i) s[i] = std::exp(log_s[i]);
        return s;
    }

    // z_corr = s .* z + mu
    Tensor apply(const Tensor& z) const {
        Tensor out(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i) out[i] = std::exp(log_s[i]) * z[i] + mu[i];
        return out;
    }
};

struct CorrectionConfig {
    int64_t epochs = 5;       // passes over the shot records
    double stepsize = 0.1;
    double decay_factor = 0.9;
    int64_t decay_every = 2;  // epochs between stepsize decays
    int64_t z_batch = 1;      // latent samples per iteration
    double prior_std = 1.0;   // relaxed-prior knob on the |z_corr|^2 term
    uint64_t seed = 7;

    void validate() const {
        if (epochs < 0) throw ValidationError("correction: epochs must be >= 0");
        if (!(stepsize > 0.0)) throw ValidationError("correction: stepsize must be > 0");
        if (!(decay_factor > 0.0) || decay_every < 1)
            throw ValidationError("correction: bad decay schedule");
        if (z_batch < 1) throw ValidationError("correction: z_batch must be >= 1");
        if (!(prior_std > 0.0)) throw ValidationError("correction: prior_std must be > 0");
    }

    double stepsize_at(int64_t epoch) const {
        double lr = stepsize;
        for (int64_t e = decay_every; e <= epoch; e += decay_every) lr *= decay_factor;
        return lr;
    }
};

namespace detail {

inline double shot_misfit(const std::vector<Tensor>& obs, const BornLiteSurvey& survey,
                          const Tensor& x_img, const std::vector<int64_t>& subset) {
    double total = 0.0;
    for (int64_t i : subset) {
        const Tensor pred = born_lite_forward(survey, i, x_img);
        const Tensor& o = obs[static_cast<size_t>(i)];
        double m = 0.0;
        for (int64_t k = 0; k < pred.numel(); ++k) {
            const double r = pred[k] - o[k];
            m += r * r;
        }
        total += m;
    }
    return total;
}

inline std::vector<int64_t> all_sources(const BornLiteSurvey& s) {
    std::vector<int64_t> idx(static_cast<size_t>(s.n_sources));
    for (int64_t i = 0; i < s.n_sources; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
}

} // namespace detail

// log of the shifted latent posterior up to its additive constant:
//   -[ N/|subset| * 1/(2 sigma^2) sum_{i in subset} misfit_i + |z|^2 / 2 ].
inline double latent_log_posterior(const Tensor& z, const Observation& obs,
                                   const ConditionalFlow& flow, const BornLiteSurvey& survey,
                                   double sigma, const std::vector<int64_t>* subset = nullptr) {
    if (!(sigma > 0.0)) throw ValidationError("latent_log_posterior: sigma must be > 0");
    const std::vector<int64_t> all = subset ? *subset : detail::all_sources(survey);
    if (all.empty()) throw ValidationError("latent_log_posterior: empty source subset");
    const Tensor x = flow_inverse(flow, z, obs.rtm_image);
    const Tensor x_img = x.reshaped({survey.nz, survey.nx});
    const double misfit = detail::shot_misfit(obs.shots, survey, x_img, all);
    const double rescale = static_cast<double>(survey.n_sources) / static_cast<double>(all.size());
    const double value =
        -(rescale * misfit / (2.0 * sigma * sigma) + 0.5 * dot(z, z));
    if (!std::isfinite(value)) throw DivergenceError("latent_log_posterior: non-finite value");
    return value;
}

// Monte-Carlo correction objective over a z batch (numeric route; the
// trainer uses the tape route built by detail::CorrectionGraph below).
inline double correction_loss(const Tensor& mu, const Tensor& log_s, const std::vector<Tensor>& zs,
                              const std::vector<int64_t>& subset, const Observation& obs,
                              const ConditionalFlow& flow, const BornLiteSurvey& survey, double sigma,
                              double prior_std = 1.0, const Tensor* prior_mean = nullptr) {
    if (zs.empty()) throw ValidationError("correction_loss: empty z batch");
    if (!(sigma > 0.0) || !(prior_std > 0.0))
        throw ValidationError("correction_loss: sigma and prior_std must be > 0");
    LatentCorrection c{mu, log_s};
    double acc = 0.0;
    const double rescale = static_cast<double>(survey.n_sources) / static_cast<double>(subset.size());
    for (const Tensor& z : zs) {
        const Tensor zc = c.apply(z);
        const Tensor x = flow_inverse(flow, zc, obs.rtm_image);
        const double misfit =
            detail::shot_misfit(obs.shots, survey, x.reshaped({survey.nz, survey.nx}), subset);
        double prior = 0.0;
        for (int64_t i = 0; i < zc.numel(); ++i) {
            const double d = zc[i] - (prior_mean ? (*prior_mean)[i] : 0.0);
            prior += d * d;
        }
        acc += rescale * misfit / (2.0 * sigma * sigma) + prior / (2.0 * prior_std * prior_std);
    }
    double entropy = 0.0;
    for (int64_t i = 0; i < log_s.numel(); ++i) entropy += log_s[i];
    const double loss = acc / static_cast<double>(zs.size()) - entropy;
    if (!std::isfinite(loss)) throw DivergenceError("correction_loss: non-finite value");
    return loss;
}

namespace detail {

// Tape for the correction objective. Built once; each iteration rebinds the
// z batch and the per-source weight vector (N * one-hot for the stochastic
// pass, all-ones for a full evaluation). Passing flow=nullptr makes the
// transport the identity map, which realizes mean-field VI directly in
// model space.
struct CorrectionGraph {
    Graph g;
    NodeId z_in = -1, w_in = -1, loss = -1;
    NodeId mu = -1, log_s = -1;
    int64_t dim = 0;
    int64_t z_batch = 0;

    CorrectionGraph(const ConditionalFlow* flow, const Observation& obs, const BornLiteSurvey& survey,
                    double sigma, int64_t z_batch_, double prior_std, const Tensor* prior_mean) {
        dim = survey.nz * survey.nx;
        if (flow && flow->arch.dim != dim)
            throw ValidationError("correction: flow dimension does not match survey grid");
        z_batch = z_batch_;
        z_in = g.input("z", {z_batch, dim});
        w_in = g.input("w", {survey.n_sources});
        mu = g.param("mu", Tensor({int64_t{1}, dim}));
        log_s = g.param("log_s", Tensor({int64_t{1}, dim}));
        const NodeId z_corr = g.add(g.mul(z_in, g.exp(log_s)), mu);

        NodeId x = z_corr;
        if (flow) {
            Tensor h = encode_condition(*flow, obs.rtm_image);
            Tensor h_b({z_batch, h.numel()});
            for (int64_t b = 0; b < z_batch; ++b)
                for (int64_t i = 0; i < h.numel(); ++i) h_b[b * h.numel() + i] = h[i];
            const FlowParamNodes ids = register_flow_params(g, *flow, /*trainable=*/false);
            x = append_flow_inverse(g, flow->arch, ids, z_corr, g.constant(h_b));
        }
        const NodeId x_img = g.reshape(x, {z_batch, survey.nz, survey.nx});
        const NodeId kernel = g.constant(survey.kernel);

        NodeId misfit_acc = -1;
        for (int64_t i = 0; i < survey.n_sources; ++i) {
            const NodeId pred = append_born_forward(g, survey, i, x_img, kernel, /*depth_axis=*/1);
            const NodeId resid =
                g.sub(pred, g.constant(scatter_to_grid(survey, obs.shots[static_cast<size_t>(i)])));
            const NodeId term = g.mul(g.sqnorm(resid), g.slice(w_in, 0, i, 1));
            misfit_acc = (misfit_acc < 0) ? term : g.add(misfit_acc, term);
        }
        const double zb = static_cast<double>(z_batch);
        const NodeId misfit = g.scale_shift(misfit_acc, 1.0 / (2.0 * sigma * sigma * zb), 0.0);
        const NodeId centered = prior_mean
                                    ? g.sub(z_corr, g.constant(prior_mean->reshaped({int64_t{1}, dim})))
                                    : z_corr;
        const NodeId prior =
            g.scale_shift(g.sqnorm(centered), 1.0 / (2.0 * prior_std * prior_std * zb), 0.0);
        const NodeId entropy = g.scale_shift(g.sum(log_s), -1.0, 0.0);
        loss = g.add(g.add(misfit, prior), entropy);
    }
};

struct CorrectionRunResult {
    LatentCorrection corr;
    std::vector<double> loss_log; // one entry per iteration (epochs * N rows)
    bool diverged = false;
};

inline CorrectionRunResult train_correction_core(const ConditionalFlow* flow, const Observation& obs,
                                                 const BornLiteSurvey& survey, double sigma,
                                                 const CorrectionConfig& cfg,
                                                 const Tensor* prior_mean) {
    cfg.validate();
    if (!(sigma > 0.0)) throw ValidationError("train_correction: sigma must be > 0");
    if (static_cast<int64_t>(obs.shots.size()) != survey.n_sources)
        throw ValidationError("train_correction: observation does not match survey source count");

    CorrectionGraph cg(flow, obs, survey, sigma, cfg.z_batch, cfg.prior_std, prior_mean);
    CorrectionRunResult res;
    res.corr = LatentCorrection::identity(cg.dim);
    if (cfg.epochs == 0) return res; // initialization: sampling stays uncorrected

    const std::vector<NodeId> params = {cg.mu, cg.log_s};
    AdamState adam;
    adam.m = {Tensor({int64_t{1}, cg.dim}), Tensor({int64_t{1}, cg.dim})};
    adam.v = {Tensor({int64_t{1}, cg.dim}), Tensor({int64_t{1}, cg.dim})};

    Rng base(cfg.seed);
    Rng perm_rng = base.fork(1);
    Rng z_rng = base.fork(2);
    Tensor w({survey.n_sources});

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.stepsize_at(epoch);
        const std::vector<int64_t> perm = perm_rng.permutation(survey.n_sources);
        for (int64_t step = 0; step < survey.n_sources; ++step) {
            const int64_t src = perm[static_cast<size_t>(step)];
            w.fill(0.0);
            w[src] = static_cast<double>(survey.n_sources); // N/|subset| with |subset| = 1
            const Tensor z = z_rng.normal_tensor({cfg.z_batch, cg.dim});
            cg.g.bind("z", z);
            cg.g.bind("w", w);
            try {
                cg.g.forward();
                cg.g.backward(cg.loss);
                adam_step_graph(cg.g, params, adam, lr);
            } catch (const DivergenceError&) {
                res.diverged = true; // last finite iterate already captured
                return res;
            }
            res.loss_log.push_back(cg.g.value(cg.loss)[0]);
            res.corr.mu = cg.g.value(cg.mu).reshaped({cg.dim});
            res.corr.log_s = cg.g.value(cg.log_s).reshaped({cg.dim});
        }
    }
    return res;
}

} // namespace detail

using CorrectionResult = detail::CorrectionRunResult;

// Adam over (mu, log s) from the uncorrected initialization mu=0, s=1, one
// fresh z batch per iteration and one data index per iteration sampled
// without replacement within each epoch.
inline CorrectionResult train_correction(const ConditionalFlow& flow, const Observation& obs,
                                         const BornLiteSurvey& survey, double sigma,
                                         const CorrectionConfig& cfg) {
    return detail::train_correction_core(&flow, obs, survey, sigma, cfg, nullptr);
}

// Non-amortized mean-field VI directly in model space: identity transport
// with a diagonal Gaussian surrogate and an N(prior_mean, prior_std^2 I)
// prior. With a freshly built (identity) flow and the standard prior this
// coincides with train_correction bit for bit under the same seed.
inline CorrectionResult meanfield_vi(const Observation& obs, const BornLiteSurvey& survey, double sigma,
                                     const Tensor& prior_mean, double prior_std,
                                     CorrectionConfig cfg) {
    cfg.prior_std = prior_std;
    if (prior_mean.numel() != survey.nz * survey.nx)
        throw ValidationError("meanfield_vi: prior mean does not match grid size");
    return detail::train_correction_core(nullptr, obs, survey, sigma, cfg, &prior_mean);
}

// ---- LCOR blob -------------------------------------------------------------
//
// "LCOR", u32 version, u64 D, f64 mu block, f64 log-s block.

inline constexpr uint32_t kCorrectionVersion = 1;

inline std::vector<uint8_t> correction_to_bytes(const LatentCorrection& c) {
    detail::require_little_endian();
    ByteWriter w;
    w.magic("LCOR");
    w.u32(kCorrectionVersion);
    w.u64(static_cast<uint64_t>(c.dim()));
    w.f64s(c.mu);
    w.f64s(c.log_s);
    return std::move(w.bytes);
}

inline LatentCorrection correction_from_bytes(const std::vector<uint8_t>& bytes) {
    detail::require_little_endian();
    ByteReader r(bytes);
    r.expect_magic("LCOR", "correction blob");
    const uint32_t version = r.u32();
    if (version != kCorrectionVersion)
        throw IoError("correction blob: unsupported version " + std::to_string(version));
    const int64_t d = static_cast<int64_t>(r.u64());
    if (d < 1 || d > (int64_t{1} << 32)) throw IoError("correction blob: implausible dimension");
    LatentCorrection c = LatentCorrection::identity(d);
    r.raw(c.mu.data(), static_cast<size_t>(d) * 8);
    r.raw(c.log_s.data(), static_cast<size_t>(d) * 8);
    r.done("correction blob");
    return c;
}

inline void save_correction(const LatentCorrection& c, const std::string& path) {
    write_file(path, correction_to_bytes(c));
}

inline LatentCorrection load_correction(const std::string& path) {
    return correction_from_bytes(read_file(path));
}

} // namespace flowcal
