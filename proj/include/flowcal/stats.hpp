#pragma once

// Posterior sampling (uncorrected and corrected) and the ensemble
// statistics suite: conditional mean, pointwise std, stabilized normalized
// std, probe histograms, confidence-interval quantiles, data-space QC, and
// the posterior-contraction sweep.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "flowcal/correction.hpp"
#include "flowcal/flow.hpp"
#include "flowcal/io.hpp"
#include "flowcal/physics.hpp"
#include "flowcal/rng.hpp"
#include "flowcal/train.hpp"

namespace flowcal {

struct EnsembleProvenance {
    std::string flow_hash;
    std::string correction_hash = "none";
    std::string y_hash;
    uint64_t seed = 0;
};

struct PosteriorEnsemble {
    std::vector<Tensor> samples;
    EnsembleProvenance prov;

    int64_t count() const { return static_cast<int64_t>(samples.size()); }
};

// Draws z ~ N(0, I) per sample (independent child streams, so ensembles
// with and without a fresh identity correction are bit-identical), applies
// z <- s .* z + mu when a correction is present, and maps through the flow
// inverse. No forward-operator evaluations. Samples take the shape of the
// condition image when the grid sizes agree.
inline PosteriorEnsemble sample_posterior(const ConditionalFlow& flow, const Tensor& y_cond, int64_t n,
                                          const LatentCorrection* corr, uint64_t seed) {
    if (n < 1) throw ValidationError("sample_posterior: n must be >= 1");
    if (corr && corr->dim() != flow.arch.dim)
        throw ValidationError("sample_posterior: correction dimension does not match flow");
    PosteriorEnsemble ens;
    ens.prov.flow_hash = hash_bytes_hex(checkpoint_to_bytes(flow));
    if (corr) ens.prov.correction_hash = hash_bytes_hex(correction_to_bytes(*corr));
    ens.prov.y_hash = hash_tensor_hex(y_cond);
    ens.prov.seed = seed;
    const bool image_shaped = (y_cond.rank() == 2 && y_cond.numel() == flow.arch.dim);
    Rng rng(seed);
    ens.samples.reserve(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        Rng rj = rng.fork(static_cast<uint64_t>(j));
        Tensor z = rj.normal_tensor({flow.arch.dim});
        if (corr) z = corr->apply(z);
        Tensor x = flow_inverse(flow, z, y_cond);
        ens.samples.push_back(image_shaped ? x.reshaped(y_cond.shape()) : std::move(x));
    }
    return ens;
}

// Learned-prior surrogate draws: the conditional architecture always needs a
// condition input, so the training-set mean condition image stands in for
// "no data conditioning".
inline PosteriorEnsemble prior_samples(const ConditionalFlow& flow, int64_t n, uint64_t seed) {
    return sample_posterior(flow, flow.cond_mean, n, nullptr, seed);
}

struct ProbePoint {
    int64_t index = 0; // flat row-major index
    static ProbePoint at(int64_t row, int64_t col, int64_t nx) { return {row * nx + col}; }
};

struct Histogram {
    ProbePoint probe;
    std::vector<double> edges;   // bins + 1 edges
    std::vector<int64_t> counts; // bins entries
};

struct EnsembleStats {
    Tensor mean;
    Tensor stddev;       // n-1 denominator
    Tensor norm_std;     // std / (|mean| + eps * max|mean|)
    Tensor ci_lo, ci_hi; // per-pixel empirical quantiles
    std::vector<Histogram> histograms;
};

namespace detail {

// Empirical quantile with linear interpolation on the sorted values.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

} // namespace detail

inline EnsembleStats ensemble_stats(const PosteriorEnsemble& ens, double eps = 0.05,
                                    const std::vector<ProbePoint>& probes = {}, int64_t bins = 50,
                                    double ci_level = 0.99) {
    const int64_t n = ens.count();
    if (n < 2) throw ValidationError("ensemble_stats: need at least 2 samples");
    if (bins < 1) throw ValidationError("ensemble_stats: bins must be >= 1");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw ValidationError("ensemble_stats: bad CI level");
    const Shape shape = ens.samples[0].shape();
    for (const Tensor& s : ens.samples)
        if (s.shape() != shape) throw ValidationError("ensemble_stats: ragged sample shapes");
    const int64_t m = shape_numel(shape);

    EnsembleStats st;
    st.mean = Tensor(shape);
    st.stddev = Tensor(shape);
    for (const Tensor& s : ens.samples)
        for (int64_t i = 0; i < m; ++i) st.mean[i] += s[i];
    for (int64_t i = 0; i < m; ++i) st.mean[i] /= static_cast<double>(n);
    for (const Tensor& s : ens.samples)
        for (int64_t i = 0; i < m; ++i) {
            const double d = s[i] - st.mean[i];
            st.stddev[i] += d * d;
        }
    for (int64_t i = 0; i < m; ++i)
        st.stddev[i] = std::sqrt(st.stddev[i] / static_cast<double>(n - 1));

    const double peak = max_abs(st.mean);
    st.norm_std = Tensor(shape);
    for (int64_t i = 0; i < m; ++i)
        st.norm_std[i] = st.stddev[i] / (std::abs(st.mean[i]) + eps * peak);

    st.ci_lo = Tensor(shape);
    st.ci_hi = Tensor(shape);
    const double tail = (1.0 - ci_level) / 2.0;
    std::vector<double> buf(static_cast<size_t>(n));
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) buf[static_cast<size_t>(j)] = ens.samples[static_cast<size_t>(j)][i];
        std::sort(buf.begin(), buf.end());
        st.ci_lo[i] = detail::quantile_sorted(buf, tail);
        st.ci_hi[i] = detail::quantile_sorted(buf, 1.0 - tail);
    }

    for (const ProbePoint& p : probes) {
        if (p.index < 0 || p.index >= m) throw ValidationError("ensemble_stats: probe out of range");
        Histogram h;
        h.probe = p;
        double lo = ens.samples[0][p.index], hi = lo;
        for (const Tensor& s : ens.samples) {
            lo = std::min(lo, s[p.index]);
            hi = std::max(hi, s[p.index]);
        }
        const double span = (hi > lo) ? (hi - lo) : 1.0;
        h.edges.resize(static_cast<size_t>(bins) + 1);
        for (int64_t b = 0; b <= bins; ++b)
            h.edges[static_cast<size_t>(b)] = lo + span * static_cast<double>(b) / static_cast<double>(bins);
        h.counts.assign(static_cast<size_t>(bins), 0);
        for (const Tensor& s : ens.samples) {
            int64_t b = static_cast<int64_t>((s[p.index] - lo) / span * static_cast<double>(bins));
            b = std::max<int64_t>(0, std::min(bins - 1, b));
            h.counts[static_cast<size_t>(b)] += 1;
        }
        st.histograms.push_back(std::move(h));
    }
    return st;
}

// SNR in dB: 20 log10(|reference| / |reference - estimate|), capped at +300
// when the residual vanishes.
inline double snr_db(const Tensor& estimate, const Tensor& reference) {
    if (!estimate.same_shape(reference)) throw ValidationError("snr_db: shape mismatch");
    const double ref = norm2(reference);
    if (!(ref > 0.0)) throw ValidationError("snr_db: reference is zero");
    double res = 0.0;
    for (int64_t i = 0; i < estimate.numel(); ++i) {
        const double d = reference[i] - estimate[i];
        res += d * d;
    }
    res = std::sqrt(res);
    if (res == 0.0) return 300.0;
    return std::min(300.0, 20.0 * std::log10(ref / res));
}

struct DataQc {
    std::vector<Tensor> predicted; // forward of the conditional mean, per source
    std::vector<Tensor> residual;  // reference - predicted
    double snr = 0.0;              // dB over the stacked panels
};

// Quality control in data space: applies the forward operator to the
// conditional mean and compares against a reference (noise-free data when
// available, otherwise the observed data).
inline DataQc data_residual_qc(const BornLiteSurvey& survey, const Tensor& cond_mean,
                               const std::vector<Tensor>& reference) {
    if (static_cast<int64_t>(reference.size()) != survey.n_sources)
        throw ValidationError("data_residual_qc: reference panel count mismatch");
    DataQc qc;
    double ref_sq = 0.0, res_sq = 0.0;
    for (int64_t i = 0; i < survey.n_sources; ++i) {
        Tensor pred = born_lite_forward(survey, i, cond_mean);
        const Tensor& ref = reference[static_cast<size_t>(i)];
        if (!pred.same_shape(ref)) throw ValidationError("data_residual_qc: panel shape mismatch");
        Tensor resid(ref.shape());
        for (int64_t k = 0; k < ref.numel(); ++k) {
            resid[k] = ref[k] - pred[k];
            ref_sq += ref[k] * ref[k];
            res_sq += resid[k] * resid[k];
        }
        qc.predicted.push_back(std::move(pred));
        qc.residual.push_back(std::move(resid));
    }
    if (!(ref_sq > 0.0)) throw ValidationError("data_residual_qc: zero reference data");
    qc.snr = (res_sq == 0.0) ? 300.0 : std::min(300.0, 10.0 * std::log10(ref_sq / res_sq));
    return qc;
}

// ---- posterior-contraction sweep -------------------------------------------

struct SweepRow {
    int64_t n_sources = 0;
    double noise_mult = 0.0;
    double snr_uncorrected = 0.0;
    double snr_corrected = 0.0;
    double std_median = 0.0;
    double std_q1 = 0.0;
    double std_q3 = 0.0;
    uint64_t seed = 0;
    bool failed = false;
};

inline const std::vector<std::string>& sweep_csv_header() {
    static const std::vector<std::string> h = {"N",          "noise_mult", "snr_uncorrected_db",
                                               "snr_corrected_db", "std_median", "std_q1",
                                               "std_q3",     "seed"};
    return h;
}

inline void sweep_to_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    CsvWriter csv(sweep_csv_header());
    for (const SweepRow& r : rows)
        csv.row({std::to_string(r.n_sources), CsvWriter::num(r.noise_mult),
                 CsvWriter::num(r.snr_uncorrected), CsvWriter::num(r.snr_corrected),
                 CsvWriter::num(r.std_median), CsvWriter::num(r.std_q1), CsvWriter::num(r.std_q3),
                 std::to_string(r.seed)});
    csv.save(path);
}

struct SweepSpec {
    std::vector<int64_t> source_counts;
    std::vector<double> multipliers;
    double sigma_base = 0.0;
    int64_t n_samples = 500;
    CorrectionConfig correction;
};

// One cell: simulate the shifted regime, correct, sample with and without
// the correction, reduce to SNRs and std quartiles. Cell failures are
// recorded in the row and the sweep continues.
inline SweepRow sweep_cell(const ConditionalFlow& flow, const Tensor& truth,
                           const BornLiteSurvey& base_survey, const SweepSpec& spec,
                           int64_t n_sources, double mult, uint64_t seed) {
    SweepRow row;
    row.n_sources = n_sources;
    row.noise_mult = mult;
    row.seed = seed;
    try {
        const BornLiteSurvey survey = with_sources(base_survey, n_sources);
        const NoiseModel noise{spec.sigma_base, mult};
        const Observation obs = observe(truth, survey, noise, seed);
        CorrectionConfig ccfg = spec.correction;
        ccfg.seed = Rng(seed).fork(11).seed();
        const CorrectionResult corr = train_correction(flow, obs, survey, noise.sigma(), ccfg);
        if (corr.diverged) throw DivergenceError("sweep cell: correction diverged");
        const uint64_t sample_seed = Rng(seed).fork(12).seed();
        const PosteriorEnsemble unc =
            sample_posterior(flow, obs.rtm_image, spec.n_samples, nullptr, sample_seed);
        const PosteriorEnsemble cor =
            sample_posterior(flow, obs.rtm_image, spec.n_samples, &corr.corr, sample_seed);
        const EnsembleStats su = ensemble_stats(unc);
        const EnsembleStats sc = ensemble_stats(cor);
        row.snr_uncorrected = snr_db(su.mean, truth);
        row.snr_corrected = snr_db(sc.mean, truth);
        std::vector<double> stds(sc.stddev.vec());
        std::sort(stds.begin(), stds.end());
        row.std_median = detail::quantile_sorted(stds, 0.5);
        row.std_q1 = detail::quantile_sorted(stds, 0.25);
        row.std_q3 = detail::quantile_sorted(stds, 0.75);
    } catch (const std::exception&) {
        row.failed = true;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        row.snr_uncorrected = row.snr_corrected = nan;
        row.std_median = row.std_q1 = row.std_q3 = nan;
    }
    return row;
}

// Full grid over {source counts} x {multipliers} x {seeds}.
inline std::vector<SweepRow> contraction_sweep(const ConditionalFlow& flow, const Tensor& truth,
                                               const BornLiteSurvey& base_survey, const SweepSpec& spec,
                                               const std::vector<uint64_t>& seeds) {
    if (spec.source_counts.size() < 2 || spec.multipliers.size() < 2)
        throw ValidationError("contraction_sweep: need at least 2 source counts and 2 multipliers");
    std::vector<SweepRow> rows;
    for (uint64_t seed : seeds)
        for (int64_t n : spec.source_counts)
            for (double m : spec.multipliers)
                rows.push_back(sweep_cell(flow, truth, base_survey, spec, n, m, seed));
    return rows;
}

// Adjacent-pair monotonicity over the sweep grid, pooled across seeds:
// pointwise-std medians should shrink with more sources and grow with more
// noise, corrected SNR the opposite way.
struct TrendCheck {
    int64_t std_comparisons = 0;
    int64_t std_violations = 0;
    int64_t snr_comparisons = 0;
    int64_t snr_violations = 0;

    double std_pass_rate() const {
        return std_comparisons ? 1.0 - static_cast<double>(std_violations) /
                                           static_cast<double>(std_comparisons)
                               : 1.0;
    }
    double snr_pass_rate() const {
        return snr_comparisons ? 1.0 - static_cast<double>(snr_violations) /
                                           static_cast<double>(snr_comparisons)
                               : 1.0;
    }
};

inline TrendCheck sweep_trend_check(const std::vector<SweepRow>& rows) {
    TrendCheck tc;
    auto find = [&](uint64_t seed, int64_t n, double m) -> const SweepRow* {
        for (const SweepRow& r : rows)
            if (r.seed == seed && r.n_sources == n && r.noise_mult == m && !r.failed) return &r;
        return nullptr;
    };
    std::vector<uint64_t> seeds;
    std::vector<int64_t> ns;
    std::vector<double> ms;
    for (const SweepRow& r : rows) {
        if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
        if (std::find(ns.begin(), ns.end(), r.n_sources) == ns.end()) ns.push_back(r.n_sources);
        if (std::find(ms.begin(), ms.end(), r.noise_mult) == ms.end()) ms.push_back(r.noise_mult);
    }
    std::sort(ns.begin(), ns.end());
    std::sort(ms.begin(), ms.end());
    for (uint64_t seed : seeds) {
        // More sources at fixed noise: std down, SNR up.
        for (double m : ms)
            for (size_t i = 0; i + 1 < ns.size(); ++i) {
                const SweepRow* lo = find(seed, ns[i], m);
                const SweepRow* hi = find(seed, ns[i + 1], m);
                if (!lo || !hi) continue;
                tc.std_comparisons++;
                if (hi->std_median > lo->std_median) tc.std_violations++;
                tc.snr_comparisons++;
                if (hi->snr_corrected < lo->snr_corrected) tc.snr_violations++;
            }
        // More noise at fixed sources: std up, SNR down.
        for (int64_t n : ns)
            for (size_t i = 0; i + 1 < ms.size(); ++i) {
                const SweepRow* lo = find(seed, n, ms[i]);
                const SweepRow* hi = find(seed, n, ms[i + 1]);
                if (!lo || !hi) continue;
                tc.std_comparisons++;
                if (hi->std_median < lo->std_median) tc.std_violations++;
                tc.snr_comparisons++;
                if (hi->snr_corrected > lo->snr_corrected) tc.snr_violations++;
            }
    }
    return tc;
}

} // namespace flowcal
