#pragma once

// Born-lite linear multi-source forward modeling: per-column depth
// convolution with a Ricker kernel, a lateral illumination taper per
// source, and a receiver restriction. Exactly linear, with a hand-derived
// adjoint that must survive the dot test at 1e-10.

#include <cmath>
#include <cstdint>
#include <vector>

#include "flowcal/autodiff.hpp"
#include "flowcal/rng.hpp"
#include "flowcal/tensor.hpp"

namespace flowcal {

// r(t) = (1 - 2 pi^2 f0^2 t^2) exp(-pi^2 f0^2 t^2), t in [-half_width, half_width],
// optionally scaled to unit L2 norm. f0 is in cycles per sample.
inline Tensor ricker(double f0, int64_t half_width, bool normalize = true) {
    if (!(f0 > 0.0)) throw ValidationError("ricker: f0 must be positive");
    if (half_width < 1) throw ValidationError("ricker: half_width must be >= 1");
    const double pf = M_PI * M_PI * f0 * f0;
    Tensor k({2 * half_width + 1});
    for (int64_t t = -half_width; t <= half_width; ++t) {
        const double t2 = static_cast<double>(t) * static_cast<double>(t);
        k[t + half_width] = (1.0 - 2.0 * pf * t2) * std::exp(-pf * t2);
    }
    if (normalize) {
        const double nrm = norm2(k);
        for (int64_t i = 0; i < k.numel(); ++i) k[i] /= nrm;
    }
    return k;
}

struct NoiseModel {
    double sigma_base = 0.0;
    double multiplier = 1.0;

    double sigma() const { return sigma_base * multiplier; }
};

struct BornLiteSurvey {
    int64_t nz = 0;
    int64_t nx = 0;
    int64_t n_sources = 0;
    std::vector<int64_t> source_cols;
    double taper_len = 4.0; // grid units
    double f0 = 0.15;       // cycles per sample
    int64_t half_width = 8;
    Tensor kernel; // rank-1, odd length
    std::vector<int64_t> receiver_cols;

    int64_t n_receivers() const { return static_cast<int64_t>(receiver_cols.size()); }

    // Illumination weights for source i over all nx columns, in (0, 1].
    Tensor taper(int64_t i) const {
        Tensor t({nx});
        const double c = static_cast<double>(source_cols[static_cast<size_t>(i)]);
        for (int64_t col = 0; col < nx; ++col) {
            const double d = static_cast<double>(col) - c;
            t[col] = std::exp(-d * d / (2.0 * taper_len * taper_len));
        }
        return t;
    }

    // Taper with non-receiver columns zeroed; the full-grid image of the
    // forward operator (used by the graph path).
    Tensor masked_taper(int64_t i) const {
        Tensor t = taper(i);
        std::vector<bool> is_rec(static_cast<size_t>(nx), false);
        for (int64_t c : receiver_cols) is_rec[static_cast<size_t>(c)] = true;
        for (int64_t col = 0; col < nx; ++col)
            if (!is_rec[static_cast<size_t>(col)]) t[col] = 0.0;
        return t;
    }

    void check_source(int64_t i) const {
        if (i < 0 || i >= n_sources)
            throw ValidationError("survey: source index " + std::to_string(i) + " out of range [0," +
                                  std::to_string(n_sources) + ")");
    }
};

inline BornLiteSurvey make_survey(int64_t nz, int64_t nx, int64_t n_sources, double taper_len = 4.0,
                                  double f0 = 0.15, int64_t half_width = 8) {
    if (nz < 1 || nx < 1 || n_sources < 1)
        throw ValidationError("make_survey: nz, nx, n_sources must be >= 1");
    BornLiteSurvey s;
    s.nz = nz;
    s.nx = nx;
    s.n_sources = n_sources;
    s.taper_len = taper_len;
    s.f0 = f0;
    s.half_width = half_width;
    s.kernel = ricker(f0, half_width);
    for (int64_t i = 0; i < n_sources; ++i) {
        const int64_t c = (2 * i + 1) * nx / (2 * n_sources);
        s.source_cols.push_back(std::min(c, nx - 1));
    }
    for (int64_t c = 0; c < nx; ++c) s.receiver_cols.push_back(c);
    return s;
}

// Same acquisition with a different source count; custom kernels and tapers
// carry over, only the evenly spaced source columns are recomputed.
inline BornLiteSurvey with_sources(const BornLiteSurvey& base, int64_t n_sources) {
    if (n_sources < 1) throw ValidationError("with_sources: n_sources must be >= 1");
    BornLiteSurvey s = base;
    s.n_sources = n_sources;
    s.source_cols.clear();
    for (int64_t i = 0; i < n_sources; ++i) {
        const int64_t c = (2 * i + 1) * s.nx / (2 * n_sources);
        s.source_cols.push_back(std::min(c, s.nx - 1));
    }
    return s;
}

// d_i = R T_i W x: depth convolution, per-column taper, receiver restriction.
inline Tensor born_lite_forward(const BornLiteSurvey& s, int64_t i, const Tensor& x) {
    s.check_source(i);
    if (x.shape() != Shape{s.nz, s.nx})
        throw ValidationError("born_lite_forward: model shape " + shape_str(x.shape()) +
                              " does not match survey grid");
    Tensor conv({s.nz, s.nx});
    detail::conv1d(x, s.kernel, 0, conv);
    const Tensor t = s.taper(i);
    Tensor d({s.nz, s.n_receivers()});
    for (int64_t r = 0; r < s.nz; ++r)
        for (int64_t j = 0; j < s.n_receivers(); ++j) {
            const int64_t col = s.receiver_cols[static_cast<size_t>(j)];
            d.at(r, j) = conv.at(r, col) * t[col];
        }
    return d;
}

// Exact adjoint: scatter receivers, taper, per-column correlation.
inline Tensor born_lite_adjoint(const BornLiteSurvey& s, int64_t i, const Tensor& d) {
    s.check_source(i);
    if (d.shape() != Shape{s.nz, s.n_receivers()})
        throw ValidationError("born_lite_adjoint: data shape " + shape_str(d.shape()) +
                              " does not match survey (expected [" + std::to_string(s.nz) + "," +
                              std::to_string(s.n_receivers()) + "])");
    const Tensor t = s.taper(i);
    Tensor full({s.nz, s.nx});
    for (int64_t r = 0; r < s.nz; ++r)
        for (int64_t j = 0; j < s.n_receivers(); ++j) {
            const int64_t col = s.receiver_cols[static_cast<size_t>(j)];
            full.at(r, col) = d.at(r, j) * t[col];
        }
    Tensor img({s.nz, s.nx});
    detail::conv1d_adjoint(full, s.kernel, 0, img);
    return img;
}

// RTM analog: the stacked adjoint image over all shot records.
inline Tensor rtm(const BornLiteSurvey& s, const std::vector<Tensor>& data) {
    if (static_cast<int64_t>(data.size()) != s.n_sources)
        throw ValidationError("rtm: got " + std::to_string(data.size()) + " panels for " +
                              std::to_string(s.n_sources) + " sources");
    Tensor img({s.nz, s.nx});
    for (int64_t i = 0; i < s.n_sources; ++i) {
        const Tensor a = born_lite_adjoint(s, i, data[static_cast<size_t>(i)]);
        for (int64_t k = 0; k < img.numel(); ++k) img[k] += a[k];
    }
    return img;
}

namespace detail {
// Variance of same-length zero-padded filtering of unit white noise at each
// depth row: sum of squared kernel taps that land in range.
inline Tensor filter_row_energy(const Tensor& kernel, int64_t len) {
    const int64_t h = (kernel.numel() - 1) / 2;
    Tensor e({len});
    for (int64_t t = 0; t < len; ++t) {
        const int64_t jlo = std::max<int64_t>(-h, t - (len - 1));
        const int64_t jhi = std::min<int64_t>(h, t);
        double s = 0.0;
        for (int64_t j = jlo; j <= jhi; ++j) s += kernel[j + h] * kernel[j + h];
        e[t] = s;
    }
    return e;
}
} // namespace detail

// Band-limited noise: white Gaussian per trace, filtered along depth with the
// source kernel, then row-normalized so every sample has std exactly
// sigma_base * multiplier.
inline Tensor bandlimited_noise(const BornLiteSurvey& s, const NoiseModel& noise, Rng& rng) {
    const int64_t nrec = s.n_receivers();
    Tensor white = rng.normal_tensor({s.nz, nrec});
    Tensor filtered({s.nz, nrec});
    detail::conv1d(white, s.kernel, 0, filtered);
    const Tensor energy = detail::filter_row_energy(s.kernel, s.nz);
    const double sigma = noise.sigma();
    for (int64_t r = 0; r < s.nz; ++r) {
        const double scale = sigma / std::sqrt(energy[r]);
        for (int64_t j = 0; j < nrec; ++j) filtered.at(r, j) *= scale;
    }
    return filtered;
}

// y_i = F_i x + eps_i for every source; seed-deterministic.
inline std::vector<Tensor> simulate_observation(const Tensor& x, const BornLiteSurvey& s,
                                                const NoiseModel& noise, uint64_t seed) {
    if (!(noise.sigma() > 0.0)) throw ValidationError("simulate_observation: noise sigma must be > 0");
    Rng rng(seed);
    std::vector<Tensor> shots;
    shots.reserve(static_cast<size_t>(s.n_sources));
    for (int64_t i = 0; i < s.n_sources; ++i) {
        Tensor d = born_lite_forward(s, i, x);
        Rng ri = rng.fork(static_cast<uint64_t>(i));
        const Tensor eps = bandlimited_noise(s, noise, ri);
        for (int64_t k = 0; k < d.numel(); ++k) d[k] += eps[k];
        shots.push_back(std::move(d));
    }
    return shots;
}

// Observed data together with its RTM summary (the flow's condition input).
struct Observation {
    std::vector<Tensor> shots;
    Tensor rtm_image;
};

inline Observation observe(const Tensor& x, const BornLiteSurvey& s, const NoiseModel& noise,
                           uint64_t seed) {
    Observation obs;
    obs.shots = simulate_observation(x, s, noise, seed);
    obs.rtm_image = rtm(s, obs.shots);
    return obs;
}

// Max over trials and sources of |<F x, d> - <x, F^T d>| / (|F x| |d| + tiny).
inline double adjoint_dot_test(const BornLiteSurvey& s, int trials, uint64_t seed) {
    if (trials < 1) throw ValidationError("adjoint_dot_test: trials must be >= 1");
    Rng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const Tensor x = rng.normal_tensor({s.nz, s.nx});
        const Tensor d = rng.normal_tensor({s.nz, s.n_receivers()});
        for (int64_t i = 0; i < s.n_sources; ++i) {
            const Tensor fx = born_lite_forward(s, i, x);
            const Tensor fd = born_lite_adjoint(s, i, d);
            const double lhs = dot(fx, d);
            const double rhs = dot(x, fd);
            const double mism = std::abs(lhs - rhs) / (norm2(fx) * norm2(d) + 1e-300);
            worst = std::max(worst, mism);
        }
    }
    return worst;
}

// Tape version of born_lite_forward on the full grid with non-receiver
// columns zeroed: value-equivalent for misfits because observed panels are
// scattered to the same grid. x_img may carry leading batch axes; depth_axis
// selects the depth extent.
inline NodeId append_born_forward(Graph& g, const BornLiteSurvey& s, int64_t i, NodeId x_img,
                                  NodeId kernel_const, int depth_axis) {
    s.check_source(i);
    const NodeId conv = g.conv1d(x_img, kernel_const, depth_axis);
    const NodeId tap = g.constant(s.masked_taper(i));
    return g.mul(conv, tap);
}

// Observed panel scattered to the full [nz, nx] grid (zeros off-receiver),
// matching append_born_forward's layout.
inline Tensor scatter_to_grid(const BornLiteSurvey& s, const Tensor& d) {
    Tensor full({s.nz, s.nx});
    for (int64_t r = 0; r < s.nz; ++r)
        for (int64_t j = 0; j < s.n_receivers(); ++j)
            full.at(r, s.receiver_cols[static_cast<size_t>(j)]) = d.at(r, j);
    return full;
}

} // namespace flowcal
