#pragma once

// The CLI's command layer. Every command is a pure function of
// (config, input artifacts, seeds); outputs carry a provenance record and
// no timestamps, so reruns are byte-identical.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "flowcal/config.hpp"
#include "flowcal/oracle.hpp"
#include "flowcal/stats.hpp"

namespace flowcal {

namespace detail {

inline std::string pair_file(const std::string& dir, const char* kind, int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%06lld.ften", kind, static_cast<long long>(i));
    return dir + "/" + buf;
}

inline void write_provenance(const std::string& dir, const std::string& command,
                             const ExperimentConfig& cfg, Json inputs, Json seeds) {
    Json prov;
    prov["command"] = command;
    prov["config_hash"] = config_hash(cfg);
    prov["inputs"] = std::move(inputs);
    prov["seeds"] = std::move(seeds);
    prov["format_versions"] = {{"checkpoint", kCheckpointVersion},
                               {"correction", kCorrectionVersion},
                               {"tensor", 1}};
    write_text_file(dir + "/provenance.json", prov.dump(2) + "\n");
}

} // namespace detail

// Deterministic reconstruction of the shift scenario named by the config:
// truth from the (possibly shifted) prior, observation under the reduced
// survey and inflated noise.
struct ScenarioData {
    BornLiteSurvey survey;
    NoiseModel noise;
    Tensor truth;
    Observation obs;
    std::vector<Tensor> noise_free;
};

inline ScenarioData build_scenario(const ExperimentConfig& cfg) {
    ScenarioData sd;
    sd.survey = with_sources(cfg.survey(), cfg.scenario.sources);
    sd.noise = NoiseModel{cfg.sigma_base, cfg.scenario.noise_multiplier};
    sd.truth = sample_prior(cfg.scenario_prior(), cfg.scenario.truth_seed);
    const uint64_t obs_seed = Rng(cfg.scenario.truth_seed).fork(1).seed();
    sd.obs = observe(sd.truth, sd.survey, sd.noise, obs_seed);
    for (int64_t i = 0; i < sd.survey.n_sources; ++i)
        sd.noise_free.push_back(born_lite_forward(sd.survey, i, sd.truth));
    return sd;
}

// ---- gen-data ---------------------------------------------------------------

inline std::string cmd_gen_data(const ExperimentConfig& cfg) {
    const std::string dir = cfg.out_dir + "/dataset";
    std::filesystem::create_directories(dir + "/pairs");
    const BornLiteSurvey survey = cfg.survey();
    const NoiseModel noise{cfg.sigma_base, cfg.noise_multiplier};
    const int64_t n = cfg.n_train + cfg.n_val;
    const auto pairs = make_dataset(n, cfg.prior, survey, noise, cfg.seed_dataset);

    Json entries = Json::array();
    for (int64_t i = 0; i < n; ++i) {
        const TrainingPair& p = pairs[static_cast<size_t>(i)];
        const std::string xf = detail::pair_file(dir + "/pairs", "x", i);
        const std::string yf = detail::pair_file(dir + "/pairs", "y", i);
        write_tensor(xf, p.x);
        write_tensor(yf, p.y_cond);
        entries.push_back({{"index", i},
                           {"prior_seed", p.prior_seed},
                           {"obs_seed", p.obs_seed},
                           {"x_hash", hash_tensor_hex(p.x)},
                           {"y_hash", hash_tensor_hex(p.y_cond)}});
    }
    Json manifest;
    manifest["config_hash"] = config_hash(cfg);
    manifest["seed"] = cfg.seed_dataset;
    manifest["n_train"] = cfg.n_train;
    manifest["n_val"] = cfg.n_val;
    manifest["pairs"] = std::move(entries);
    write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
    detail::write_provenance(dir, "gen-data", cfg, Json::object(),
                             Json{{"dataset", cfg.seed_dataset}});
    return dir;
}

inline std::vector<TrainingPair> load_dataset(const std::string& dir, int64_t* n_train_out) {
    Json manifest;
    try {
        const auto bytes = read_file(dir + "/manifest.json");
        manifest = Json::parse(bytes.begin(), bytes.end());
    } catch (const Json::exception& e) {
        throw IoError(std::string("dataset manifest: ") + e.what());
    }
    const int64_t n_train = manifest.at("n_train").get<int64_t>();
    const int64_t n_val = manifest.at("n_val").get<int64_t>();
    std::vector<TrainingPair> pairs;
    for (const Json& e : manifest.at("pairs")) {
        TrainingPair p;
        const int64_t i = e.at("index").get<int64_t>();
        p.prior_seed = e.at("prior_seed").get<uint64_t>();
        p.obs_seed = e.at("obs_seed").get<uint64_t>();
        p.x = read_tensor(detail::pair_file(dir + "/pairs", "x", i));
        p.y_cond = read_tensor(detail::pair_file(dir + "/pairs", "y", i));
        if (hash_tensor_hex(p.x) != e.at("x_hash").get<std::string>() ||
            hash_tensor_hex(p.y_cond) != e.at("y_hash").get<std::string>())
            throw IoError("dataset: hash mismatch at pair " + std::to_string(i));
        pairs.push_back(std::move(p));
    }
    if (static_cast<int64_t>(pairs.size()) != n_train + n_val)
        throw IoError("dataset: pair count does not match the manifest split");
    if (n_train_out) *n_train_out = n_train;
    return pairs;
}

// ---- train ------------------------------------------------------------------

struct TrainOutputs {
    std::string checkpoint;
    std::string curves;
    bool diverged = false;
};

inline TrainOutputs cmd_train(const ExperimentConfig& cfg, const std::string& dataset_dir) {
    int64_t n_train = 0;
    const auto pairs = load_dataset(dataset_dir, &n_train);
    const FlowArch a = cfg.flow_arch();
    ConditionalFlow flow =
        build_flow(a.dim, a.cond_dim, a.layers, a.hidden, a.feature, a.clamp, cfg.train.seed);
    const TrainResult res = train_amortized(flow, pairs, n_train, cfg.train);

    const std::string dir = cfg.out_dir + "/train";
    std::filesystem::create_directories(dir);
    TrainOutputs out;
    out.checkpoint = dir + "/checkpoint.bin";
    out.curves = dir + "/curves.csv";
    out.diverged = res.diverged;
    save_checkpoint(flow, out.checkpoint, res.curves);
    curves_to_csv(res.curves, out.curves);
    detail::write_provenance(dir, "train", cfg,
                             Json{{"dataset_manifest",
                                   hash_bytes_hex(read_file(dataset_dir + "/manifest.json"))}},
                             Json{{"train", cfg.train.seed}});
    return out;
}

// ---- correct ----------------------------------------------------------------

struct CorrectOutputs {
    std::string blob;
    std::string log;
    bool diverged = false;
};

inline CorrectOutputs cmd_correct(const ExperimentConfig& cfg, const std::string& checkpoint_path) {
    const LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    if (ck.flow.arch != cfg.flow_arch())
        throw ValidationError("cmd_correct: checkpoint architecture does not match the config");
    const ScenarioData sd = build_scenario(cfg);
    const CorrectionResult res =
        train_correction(ck.flow, sd.obs, sd.survey, sd.noise.sigma(), cfg.correction);

    const std::string dir = cfg.out_dir + "/correct";
    std::filesystem::create_directories(dir);
    CorrectOutputs out;
    out.blob = dir + "/correction.lcor";
    out.log = dir + "/correction_log.csv";
    out.diverged = res.diverged;
    save_correction(res.corr, out.blob);
    CsvWriter log({"iteration", "loss"});
    for (size_t i = 0; i < res.loss_log.size(); ++i)
        log.row({std::to_string(i), CsvWriter::num(res.loss_log[i])});
    log.save(out.log);
    write_tensor(dir + "/rtm.ften", sd.obs.rtm_image);
    detail::write_provenance(dir, "correct", cfg,
                             Json{{"checkpoint", hash_bytes_hex(read_file(checkpoint_path))}},
                             Json{{"truth", cfg.scenario.truth_seed},
                                  {"correction", cfg.correction.seed}});
    return out;
}

// ---- infer ------------------------------------------------------------------

namespace detail {

inline void export_image(const std::string& stem, const Tensor& img) {
    write_tensor(stem + ".ften", img);
    const PgmScale sc = write_pgm16(stem + ".pgm", img);
    write_text_file(stem + ".json",
                    Json{{"min", sc.min},
                         {"max", sc.max},
                         {"shape", img.shape()},
                         {"note", "PGM samples map [min,max] to [0,65535], big-endian"}}
                            .dump(2) +
                        "\n");
}

inline void append_histograms(CsvWriter& csv, const std::vector<Histogram>& hs,
                              const std::string& which) {
    for (size_t p = 0; p < hs.size(); ++p)
        for (size_t b = 0; b < hs[p].counts.size(); ++b)
            csv.row({std::to_string(p), CsvWriter::num(hs[p].edges[b]),
                     CsvWriter::num(hs[p].edges[b + 1]), std::to_string(hs[p].counts[b]), which});
}

} // namespace detail

inline std::string cmd_infer(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                             const std::string& correction_path = {}) {
    const LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    if (ck.flow.arch != cfg.flow_arch())
        throw ValidationError("cmd_infer: checkpoint architecture does not match the config");
    const ScenarioData sd = build_scenario(cfg);
    LatentCorrection corr;
    const bool corrected = !correction_path.empty();
    if (corrected) {
        corr = load_correction(correction_path);
        if (corr.dim() != ck.flow.arch.dim)
            throw ValidationError("cmd_infer: correction dimension does not match the flow");
    }

    std::vector<ProbePoint> probes;
    for (const auto& [r, c] : cfg.inference.probes)
        probes.push_back(ProbePoint::at(r, c, cfg.prior.nx));

    const std::string dir = cfg.out_dir + (corrected ? "/infer_corrected" : "/infer");
    std::filesystem::create_directories(dir);

    const PosteriorEnsemble amortized =
        sample_posterior(ck.flow, sd.obs.rtm_image, cfg.inference.n_samples, nullptr,
                         cfg.seed_inference);
    const PosteriorEnsemble* active = &amortized;
    PosteriorEnsemble corrected_ens;
    if (corrected) {
        corrected_ens = sample_posterior(ck.flow, sd.obs.rtm_image, cfg.inference.n_samples, &corr,
                                         cfg.seed_inference);
        active = &corrected_ens;
    }
    const EnsembleStats st = ensemble_stats(*active, cfg.inference.norm_eps, probes,
                                            cfg.inference.bins, cfg.inference.ci_level);
    const EnsembleStats amortized_st =
        ensemble_stats(amortized, cfg.inference.norm_eps, probes, cfg.inference.bins,
                       cfg.inference.ci_level);

    detail::export_image(dir + "/conditional_mean", st.mean);
    detail::export_image(dir + "/pointwise_std", st.stddev);
    detail::export_image(dir + "/normalized_std", st.norm_std);
    write_tensor(dir + "/truth.ften", sd.truth);
    write_tensor(dir + "/rtm.ften", sd.obs.rtm_image);

    // three histogram families: learned prior, amortized posterior, corrected
    const PosteriorEnsemble prior_ens =
        prior_samples(ck.flow, cfg.inference.n_samples, Rng(cfg.seed_inference).fork(3).seed());
    const EnsembleStats prior_st = ensemble_stats(prior_ens, cfg.inference.norm_eps, probes,
                                                  cfg.inference.bins, cfg.inference.ci_level);
    CsvWriter hist({"probe_id", "bin_lo", "bin_hi", "count", "which"});
    detail::append_histograms(hist, prior_st.histograms, "prior");
    detail::append_histograms(hist, amortized_st.histograms, "amortized");
    if (corrected) detail::append_histograms(hist, st.histograms, "corrected");
    hist.save(dir + "/histograms.csv");

    CsvWriter traces({"probe_col", "depth_row", "ci_lo", "mean", "ci_hi", "truth"});
    for (const auto& [pr, pc] : cfg.inference.probes) {
        (void)pr;
        for (int64_t r = 0; r < cfg.prior.nz; ++r)
            traces.row({std::to_string(pc), std::to_string(r),
                        CsvWriter::num(st.ci_lo.at(r, pc)), CsvWriter::num(st.mean.at(r, pc)),
                        CsvWriter::num(st.ci_hi.at(r, pc)), CsvWriter::num(sd.truth.at(r, pc))});
    }
    traces.save(dir + "/ci_traces.csv");

    const DataQc qc = data_residual_qc(sd.survey, st.mean, sd.noise_free);
    Json summary;
    summary["snr_mean_vs_truth_db"] = snr_db(st.mean, sd.truth);
    summary["snr_amortized_mean_vs_truth_db"] = snr_db(amortized_st.mean, sd.truth);
    summary["snr_rtm_vs_truth_db"] = snr_db(sd.obs.rtm_image, sd.truth);
    summary["predicted_data_snr_db"] = qc.snr;
    summary["corrected"] = corrected;
    summary["normalized_std_note"] =
        "pointwise std stabilized by |mean| + eps * max|mean| (no Hilbert envelope)";
    summary["provenance"] = {{"flow_hash", active->prov.flow_hash},
                             {"correction_hash", active->prov.correction_hash},
                             {"y_hash", active->prov.y_hash},
                             {"seed", active->prov.seed}};
    write_text_file(dir + "/summary.json", summary.dump(2) + "\n");
    detail::write_provenance(
        dir, "infer", cfg,
        Json{{"checkpoint", hash_bytes_hex(read_file(checkpoint_path))},
             {"correction", corrected ? hash_bytes_hex(read_file(correction_path)) : "none"}},
        Json{{"inference", cfg.seed_inference}, {"truth", cfg.scenario.truth_seed}});
    return dir;
}

// ---- verify -----------------------------------------------------------------

struct VerifyOutputs {
    std::string csv;
    TrendCheck trends;
    bool passed = false;
};

inline VerifyOutputs cmd_verify(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                                std::ostream& log = std::cout) {
    const LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    if (ck.flow.arch != cfg.flow_arch())
        throw ValidationError("cmd_verify: checkpoint architecture does not match the config");
    const Tensor truth = sample_prior(cfg.scenario_prior(), cfg.scenario.truth_seed);

    SweepSpec spec;
    spec.source_counts = cfg.sweep.source_counts;
    spec.multipliers = cfg.sweep.multipliers;
    spec.sigma_base = cfg.sigma_base;
    spec.n_samples = cfg.sweep.n_samples;
    spec.correction = cfg.correction;
    const std::vector<SweepRow> rows =
        contraction_sweep(ck.flow, truth, cfg.survey(), spec, cfg.sweep.seeds);

    const std::string dir = cfg.out_dir + "/verify";
    std::filesystem::create_directories(dir);
    VerifyOutputs out;
    out.csv = dir + "/sweep.csv";
    sweep_to_csv(rows, out.csv);
    out.trends = sweep_trend_check(rows);
    out.passed = out.trends.std_pass_rate() >= cfg.sweep.min_pass_rate &&
                 out.trends.snr_pass_rate() >= cfg.sweep.min_pass_rate;
    for (const SweepRow& r : rows)
        if (r.failed) out.passed = false;

    log << "verify: std monotonicity " << (out.trends.std_comparisons - out.trends.std_violations)
        << "/" << out.trends.std_comparisons << ", snr monotonicity "
        << (out.trends.snr_comparisons - out.trends.snr_violations) << "/"
        << out.trends.snr_comparisons << ", required pass rate " << cfg.sweep.min_pass_rate
        << (out.passed ? " -> PASS" : " -> FAIL") << "\n";

    Json summary;
    summary["std_comparisons"] = out.trends.std_comparisons;
    summary["std_violations"] = out.trends.std_violations;
    summary["snr_comparisons"] = out.trends.snr_comparisons;
    summary["snr_violations"] = out.trends.snr_violations;
    summary["min_pass_rate"] = cfg.sweep.min_pass_rate;
    summary["passed"] = out.passed;
    write_text_file(dir + "/summary.json", summary.dump(2) + "\n");
    detail::write_provenance(dir, "verify", cfg,
                             Json{{"checkpoint", hash_bytes_hex(read_file(checkpoint_path))}},
                             Json{{"sweep_seeds", cfg.sweep.seeds}});
    return out;
}

// ---- oracle-check -----------------------------------------------------------

// The gaussian-oracle acceptance battery: every check prints its tolerance
// and seed so failures are reproducible.
inline bool cmd_oracle_check(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
    bool ok = true;
    auto report = [&](const std::string& name, double value, double tol, uint64_t seed) {
        const bool pass = value < tol;
        ok = ok && pass;
        log << (pass ? "[PASS] " : "[FAIL] ") << name << ": " << value << " (tolerance " << tol
            << ", seed " << seed << ")\n";
    };

    // 1. adjoint dot test on the configured survey
    const BornLiteSurvey survey = cfg.survey();
    report("adjoint dot test (100 trials)", adjoint_dot_test(survey, 100, 101), 1e-10, 101);

    // 2. dense operator vs live rtm on a small grid
    {
        const BornLiteSurvey small = make_survey(8, 8, 3, 3.0, 0.2, 4);
        const Tensor jmat = assemble_dense_operator(small);
        Rng rng(102);
        std::vector<Tensor> data;
        for (int64_t i = 0; i < 3; ++i) data.push_back(rng.normal_tensor({8, 8}));
        const Tensor img = rtm(small, data);
        const Tensor stacked = stack_shots(data);
        Tensor jt({64});
        for (int64_t k = 0; k < 64; ++k) {
            double acc = 0.0;
            for (int64_t r = 0; r < jmat.dim(0); ++r) acc += jmat.at(r, k) * stacked[r];
            jt[k] = acc;
        }
        report("rtm vs dense J^T d (8x8)", max_abs_diff(img.reshaped({64}), jt), 1e-10, 102);
    }

    // 3. analytic posterior stationarity
    {
        const BornLiteSurvey small = make_survey(6, 6, 2, 2.0, 0.2, 3);
        DenseGaussianProblem p;
        p.J = assemble_dense_operator(small);
        p.sigma = 0.5;
        p.prior_mean = Tensor({36});
        p.prior_cov = Tensor({36, 36});
        for (int64_t i = 0; i < 36; ++i) p.prior_cov.at(i, i) = 1.0;
        Rng rng(103);
        const Tensor y = rng.normal_tensor({p.J.dim(0)});
        const GaussianDist post = analytic_posterior(p, y);
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
        report("posterior mean stationarity", norm2(grad), 1e-8, 103);
    }

    // 4. reverse-KL diagonal fit identities
    {
        GaussianDist t{Tensor({2}), Tensor({2, 2})};
        t.cov.at(0, 0) = 1.0;
        t.cov.at(1, 1) = 1.0;
        t.cov.at(0, 1) = 0.8;
        t.cov.at(1, 0) = 0.8;
        const DiagFit fit = reverse_kl_diag_fit(t);
        report("diag fit contraction sqrt(1-rho^2)", std::abs(fit.scale[0] - 0.6), 1e-12, 104);
    }

    // 5. autodiff vs central differences on a composite graph per seed
    {
        double worst = 0.0;
        for (uint64_t s = 0; s < 10; ++s) {
            Rng rng(105 + s);
            Graph g;
            auto rnd = [&](Shape shape) {
                Tensor t(std::move(shape));
                for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.6 * rng.normal();
                return t;
            };
            const NodeId w1 = g.param("w1", rnd({3, 5}));
            const NodeId w2 = g.param("w2", rnd({5, 4}));
            const NodeId b2 = g.param("b2", rnd({1, 4}));
            const NodeId k = g.param("k", rnd({3}));
            const NodeId x = g.constant(rnd({2, 3}));
            const NodeId h1 = g.tanh(g.matmul(x, w1));
            const NodeId h2 = g.add(g.matmul(h1, w2), b2);
            const NodeId c = g.conv1d(g.exp(g.tanh(h2)), k, 1);
            const NodeId loss = g.add(g.sqnorm(c), g.sum(g.log(g.scale_shift(g.tanh(h2), 0.4, 2.0))));
            g.forward();
            g.backward(loss);
            const std::vector<NodeId> ids = g.trainable_params();
            std::vector<Tensor> analytic, init;
            for (NodeId id : ids) {
                analytic.push_back(g.grad(id));
                init.push_back(g.value(id));
            }
            auto fn = [&](const std::vector<Tensor>& params) {
                for (size_t i = 0; i < ids.size(); ++i) g.param_value(ids[i]) = params[i];
                g.forward();
                return g.value(loss)[0];
            };
            const std::vector<Tensor> fd = fd_gradient(fn, init, 1e-5);
            double scale = 0.0, diff = 0.0;
            for (size_t i = 0; i < ids.size(); ++i) {
                scale = std::max(scale, max_abs(analytic[i]));
                diff = std::max(diff, max_abs_diff(analytic[i], fd[i]));
            }
            worst = std::max(worst, diff / std::max(scale, 1e-12));
        }
        report("autodiff vs finite differences (10 graphs)", worst, 1e-5, 105);
    }
    return ok;
}

} // namespace flowcal
