#pragma once

// Synthetic layered-reflectivity prior and the training-pair factory:
// (x, RTM(simulate(x))) joint samples.

#include <cmath>
#include <cstdint>
#include <vector>

#include "flowcal/physics.hpp"
#include "flowcal/rng.hpp"
#include "flowcal/tensor.hpp"

namespace flowcal {

struct GeoPriorConfig {
    int64_t nz = 16;
    int64_t nx = 32;
    int64_t min_layers = 2;
    int64_t max_layers = 5;
    double min_amp = 0.3;
    double max_amp = 1.0;
    double min_undulation = 0.3; // rows
    double max_undulation = 1.5;
    double min_wavelength = 8.0; // columns
    double max_wavelength = 32.0;
    double max_dip = 1.5;     // rows of depth change across the full width
    int64_t water_rows = 2;   // zero reflectivity at the top

    void validate() const {
        if (nz < 2 || nx < 2) throw ValidationError("prior: grid must be at least 2x2");
        if (min_layers < 0 || max_layers < min_layers)
            throw ValidationError("prior: bad layer-count range");
        if (!(min_amp >= 0.0) || !(max_amp >= min_amp)) throw ValidationError("prior: bad amplitude range");
        if (!(max_undulation >= min_undulation) || !(max_wavelength >= min_wavelength) ||
            !(min_wavelength > 0.0))
            throw ValidationError("prior: bad undulation/wavelength range");
        if (water_rows < 0 || water_rows >= nz) throw ValidationError("prior: water rows must be < nz");
    }
};

// Piecewise-layered reflectivity: each interface is a smooth dipping,
// undulating curve painted with a signed amplitude; water rows stay zero and
// values are clamped to the amplitude cap.
inline Tensor sample_prior(const GeoPriorConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Tensor img({cfg.nz, cfg.nx});
    const int64_t span = cfg.max_layers - cfg.min_layers;
    const int64_t n_layers =
        cfg.min_layers + (span > 0 ? static_cast<int64_t>(rng.below(static_cast<uint64_t>(span + 1))) : 0);
    for (int64_t l = 0; l < n_layers; ++l) {
        const double base = rng.uniform(static_cast<double>(cfg.water_rows) + 1.0,
                                        static_cast<double>(cfg.nz - 1));
        const double dip = rng.uniform(-cfg.max_dip, cfg.max_dip);
        const double und_amp = rng.uniform(cfg.min_undulation, cfg.max_undulation);
        const double wavelength = rng.uniform(cfg.min_wavelength, cfg.max_wavelength);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        double amp = rng.uniform(cfg.min_amp, cfg.max_amp);
        if (rng.uniform() < 0.5) amp = -amp;
        for (int64_t c = 0; c < cfg.nx; ++c) {
            const double frac = static_cast<double>(c) / static_cast<double>(cfg.nx - 1) - 0.5;
            const double depth = base + dip * frac +
                                 und_amp * std::sin(2.0 * M_PI * static_cast<double>(c) / wavelength + phase);
            int64_t r = static_cast<int64_t>(std::lround(depth));
            r = std::max(cfg.water_rows, std::min(cfg.nz - 1, r));
            img.at(r, c) += amp;
        }
    }
    for (int64_t i = 0; i < img.numel(); ++i)
        img[i] = std::max(-cfg.max_amp, std::min(cfg.max_amp, img[i]));
    for (int64_t r = 0; r < cfg.water_rows; ++r)
        for (int64_t c = 0; c < cfg.nx; ++c) img.at(r, c) = 0.0;
    return img;
}

struct TrainingPair {
    Tensor x;      // model image
    Tensor y_cond; // RTM image conditioning input
    uint64_t prior_seed = 0;
    uint64_t obs_seed = 0;
};

// n joint samples; y_cond = rtm(simulate_observation(x)). Per-pair seeds are
// derived from the dataset seed so pairs can be regenerated independently.
inline std::vector<TrainingPair> make_dataset(int64_t n, const GeoPriorConfig& cfg,
                                              const BornLiteSurvey& survey, const NoiseModel& noise,
                                              uint64_t seed) {
    if (n < 1) throw ValidationError("make_dataset: n must be >= 1");
    if (cfg.nz != survey.nz || cfg.nx != survey.nx)
        throw ValidationError("make_dataset: prior grid does not match survey grid");
    Rng rng(seed);
    std::vector<TrainingPair> pairs;
    pairs.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        TrainingPair p;
        p.prior_seed = rng.fork(static_cast<uint64_t>(2 * i)).seed();
        p.obs_seed = rng.fork(static_cast<uint64_t>(2 * i + 1)).seed();
        p.x = sample_prior(cfg, p.prior_seed);
        p.y_cond = rtm(survey, simulate_observation(p.x, survey, noise, p.obs_seed));
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// Mean condition image over a set of pairs (the flow's stand-in condition
// for prior sampling).
inline Tensor mean_condition(const std::vector<TrainingPair>& pairs) {
    if (pairs.empty()) throw ValidationError("mean_condition: empty dataset");
    Tensor m(pairs[0].y_cond.shape());
    for (const TrainingPair& p : pairs)
        for (int64_t i = 0; i < m.numel(); ++i) m[i] += p.y_cond[i];
    for (int64_t i = 0; i < m.numel(); ++i) m[i] /= static_cast<double>(pairs.size());
    return m;
}

} // namespace flowcal
