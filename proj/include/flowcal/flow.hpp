#pragma once

// Conditional normalizing flow f_phi(x; y): a stack of affine coupling
// layers over the flattened model vector, conditioned on a feature encoding
// of the observed-data summary image. Invertible in closed form with an
// exact log-determinant.
//
// Layer k splits the vector into halves A = [0, D/2) and B = [D/2, D),
// alternating which half is passive. The transformed half is scaled by
// exp(clamp * tanh(raw)) and shifted, where (raw, shift) come from a
// two-hidden-layer conditioner fed the passive half and the condition
// features. Conditioner output layers are zero-initialized, so a freshly
// built flow is the identity map with zero log-determinant.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flowcal/autodiff.hpp"
#include "flowcal/rng.hpp"
#include "flowcal/tensor.hpp"

namespace flowcal {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct FlowArch {
    int64_t dim = 0;      // D: flattened model size
    int64_t cond_dim = 0; // C: flattened condition-image size
    int layers = 8;
    int64_t hidden = 0;  // conditioner hidden width
    int64_t feature = 0; // condition feature width
    double clamp = 2.0;  // scale stabilization amplitude

    bool operator==(const FlowArch&) const = default;

    int64_t passive_size(int k) const {
        const int64_t half = dim / 2;
        return (k % 2 == 0) ? half : dim - half;
    }
    int64_t transformed_size(int k) const { return dim - passive_size(k); }
    // Even layers keep the front half passive; odd layers the back half.
    bool passive_is_front(int k) const { return k % 2 == 0; }
};

// Desk-scale defaults: K=8 layers, hidden 4D, feature 2D.
inline FlowArch default_arch(int64_t dim, int64_t cond_dim) {
    FlowArch a;
    a.dim = dim;
    a.cond_dim = cond_dim;
    a.layers = 8;
    a.hidden = 4 * dim;
    a.feature = 2 * dim;
    a.clamp = 2.0;
    return a;
}

struct CouplingLayer {
    Tensor w1, b1, w2, b2, w3, b3;
};

struct ConditionalFlow {
    FlowArch arch;
    Tensor enc_w1, enc_b1, enc_w2, enc_b2; // condition encoder
    std::vector<CouplingLayer> layers;
    Tensor cond_mean; // training-set mean condition image, used by prior sampling

    // Canonical parameter enumeration; fixes checkpoint block order and the
    // graph registration order.
    template <class F>
    void for_each_param(F&& f) {
        f("enc.w1", enc_w1);
        f("enc.b1", enc_b1);
        f("enc.w2", enc_w2);
        f("enc.b2", enc_b2);
        for (size_t k = 0; k < layers.size(); ++k) {
            const std::string p = "layer" + std::to_string(k) + ".";
            f(p + "w1", layers[k].w1);
            f(p + "b1", layers[k].b1);
            f(p + "w2", layers[k].w2);
            f(p + "b2", layers[k].b2);
            f(p + "w3", layers[k].w3);
            f(p + "b3", layers[k].b3);
        }
        f("cond_mean", cond_mean);
    }
    template <class F>
    void for_each_param(F&& f) const {
        const_cast<ConditionalFlow*>(this)->for_each_param(
            [&](const std::string& n, Tensor& t) { f(n, static_cast<const Tensor&>(t)); });
    }
};

namespace detail {

inline Tensor xavier(int64_t fan_in, int64_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w({fan_in, fan_out});
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-a, a);
    return w;
}

// row [1,a] * W [a,b] + bias [1,b]
inline Tensor affine_row(const Tensor& row, const Tensor& w, const Tensor& b) {
    Tensor out({int64_t{1}, w.dim(1)});
    matmul(row, w, out);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

inline void tanh_inplace(Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::tanh(t[i]);
}

} // namespace detail

inline ConditionalFlow build_flow(int64_t dim, int64_t cond_dim, int layers, int64_t hidden,
                                  int64_t feature, double clamp, uint64_t seed) {
    if (dim < 2) throw ValidationError("build_flow: coupling needs dim >= 2");
    if (layers < 1) throw ValidationError("build_flow: layer count must be >= 1");
    if (cond_dim < 1 || hidden < 1 || feature < 1)
        throw ValidationError("build_flow: widths must be positive");
    ConditionalFlow f;
    f.arch = FlowArch{dim, cond_dim, layers, hidden, feature, clamp};
    Rng rng(seed);
    f.enc_w1 = detail::xavier(cond_dim, feature, rng);
    f.enc_b1 = Tensor({int64_t{1}, feature});
    f.enc_w2 = detail::xavier(feature, feature, rng);
    f.enc_b2 = Tensor({int64_t{1}, feature});
    for (int k = 0; k < layers; ++k) {
        const int64_t p = f.arch.passive_size(k);
        const int64_t t = f.arch.transformed_size(k);
        CouplingLayer layer;
        layer.w1 = detail::xavier(p + feature, hidden, rng);
        layer.b1 = Tensor({int64_t{1}, hidden});
        layer.w2 = detail::xavier(hidden, hidden, rng);
        layer.b2 = Tensor({int64_t{1}, hidden});
        layer.w3 = Tensor({hidden, 2 * t}); // zero: identity at construction
        layer.b3 = Tensor({int64_t{1}, 2 * t});
        f.layers.push_back(std::move(layer));
    }
    f.cond_mean = Tensor({cond_dim});
    return f;
}

inline ConditionalFlow build_flow(int64_t dim, int64_t cond_dim, uint64_t seed) {
    const FlowArch a = default_arch(dim, cond_dim);
    return build_flow(a.dim, a.cond_dim, a.layers, a.hidden, a.feature, a.clamp, seed);
}

struct FlowForwardResult {
    Tensor z;
    double logdet = 0.0;
};

namespace detail {

inline Tensor as_row(const Tensor& v, int64_t expected, const char* what) {
    if (v.numel() != expected)
        throw ValidationError(std::string(what) + ": expected " + std::to_string(expected) +
                              " elements, got " + std::to_string(v.numel()));
    return v.reshaped({int64_t{1}, expected});
}

// Conditioner MLP for one layer: returns (raw, shift) rows of width t.
inline void conditioner_eval(const CouplingLayer& L, const Tensor& pass_row, const Tensor& h,
                             int64_t t, Tensor& raw, Tensor& shift) {
    Tensor u({int64_t{1}, pass_row.numel() + h.numel()});
    for (int64_t i = 0; i < pass_row.numel(); ++i) u[i] = pass_row[i];
    for (int64_t i = 0; i < h.numel(); ++i) u[pass_row.numel() + i] = h[i];
    Tensor h1 = affine_row(u, L.w1, L.b1);
    tanh_inplace(h1);
    Tensor h2 = affine_row(h1, L.w2, L.b2);
    tanh_inplace(h2);
    const Tensor out = affine_row(h2, L.w3, L.b3);
    raw = Tensor({int64_t{1}, t});
    shift = Tensor({int64_t{1}, t});
    for (int64_t i = 0; i < t; ++i) {
        raw[i] = out[i];
        shift[i] = out[t + i];
    }
}

} // namespace detail

// Condition features h for a condition image y (any shape with C elements).
inline Tensor encode_condition(const ConditionalFlow& f, const Tensor& y) {
    const Tensor row = detail::as_row(y, f.arch.cond_dim, "encode_condition");
    Tensor h1 = detail::affine_row(row, f.enc_w1, f.enc_b1);
    detail::tanh_inplace(h1);
    return detail::affine_row(h1, f.enc_w2, f.enc_b2);
}

// z = f_phi(x; y) with logdet = sum over transformed coordinates of
// clamp * tanh(raw), accumulated over layers.
inline FlowForwardResult flow_forward(const ConditionalFlow& f, const Tensor& x, const Tensor& y) {
    Tensor v = detail::as_row(x, f.arch.dim, "flow_forward");
    if (!v.all_finite()) throw DivergenceError("flow_forward: non-finite input");
    const Tensor h = encode_condition(f, y);
    double logdet = 0.0;
    for (int k = 0; k < f.arch.layers; ++k) {
        const CouplingLayer& L = f.layers[static_cast<size_t>(k)];
        const int64_t p = f.arch.passive_size(k);
        const int64_t t = f.arch.transformed_size(k);
        const bool front = f.arch.passive_is_front(k);
        const int64_t poff = front ? 0 : f.arch.dim - p;
        const int64_t toff = front ? p : 0;
        Tensor pass({int64_t{1}, p});
        for (int64_t i = 0; i < p; ++i) pass[i] = v[poff + i];
        Tensor raw, shift;
        detail::conditioner_eval(L, pass, h, t, raw, shift);
        for (int64_t i = 0; i < t; ++i) {
            const double lf = f.arch.clamp * std::tanh(raw[i]);
            v[toff + i] = v[toff + i] * std::exp(lf) + shift[i];
            logdet += lf;
        }
    }
    if (!v.all_finite() || !std::isfinite(logdet))
        throw DivergenceError("flow_forward: non-finite intermediate");
    return {v.reshaped({f.arch.dim}), logdet};
}

// Exact layer-by-layer inversion in reverse order.
inline Tensor flow_inverse(const ConditionalFlow& f, const Tensor& z, const Tensor& y) {
    Tensor v = detail::as_row(z, f.arch.dim, "flow_inverse");
    if (!v.all_finite()) throw DivergenceError("flow_inverse: non-finite input");
    const Tensor h = encode_condition(f, y);
    for (int k = f.arch.layers - 1; k >= 0; --k) {
        const CouplingLayer& L = f.layers[static_cast<size_t>(k)];
        const int64_t p = f.arch.passive_size(k);
        const int64_t t = f.arch.transformed_size(k);
        const bool front = f.arch.passive_is_front(k);
        const int64_t poff = front ? 0 : f.arch.dim - p;
        const int64_t toff = front ? p : 0;
        Tensor pass({int64_t{1}, p});
        for (int64_t i = 0; i < p; ++i) pass[i] = v[poff + i];
        Tensor raw, shift;
        detail::conditioner_eval(L, pass, h, t, raw, shift);
        for (int64_t i = 0; i < t; ++i) {
            const double lf = f.arch.clamp * std::tanh(raw[i]);
            v[toff + i] = (v[toff + i] - shift[i]) * std::exp(-lf);
        }
    }
    if (!v.all_finite()) throw DivergenceError("flow_inverse: non-finite intermediate");
    return v.reshaped({f.arch.dim});
}

// log p_phi(x | y) = log N(f_phi(x; y) | 0, I) + logdet
//                  = -D/2 log(2 pi) - |z|^2 / 2 + logdet.
inline double log_density(const ConditionalFlow& f, const Tensor& x, const Tensor& y) {
    const FlowForwardResult r = flow_forward(f, x, y);
    const double zsq = dot(r.z, r.z);
    return -0.5 * static_cast<double>(f.arch.dim) * kLog2Pi - 0.5 * zsq + r.logdet;
}

// ---- tape builders ---------------------------------------------------------
//
// The graph path reuses the same matmul/elementwise kernels as the numeric
// path; batched evaluation differs from per-sample evaluation only in
// floating-point summation grouping.

struct FlowParamNodes {
    std::vector<NodeId> ordered; // same order as for_each_param
    NodeId enc_w1 = -1, enc_b1 = -1, enc_w2 = -1, enc_b2 = -1;
    struct LayerNodes {
        NodeId w1, b1, w2, b2, w3, b3;
    };
    std::vector<LayerNodes> layers;
};

// Registers every flow parameter on the tape, trainable or frozen. cond_mean
// is metadata, not part of the computation, and is skipped.
inline FlowParamNodes register_flow_params(Graph& g, const ConditionalFlow& f, bool trainable) {
    FlowParamNodes ids;
    auto reg = [&](const std::string& name, const Tensor& t) {
        const NodeId id = trainable ? g.param(name, t) : g.constant(t);
        ids.ordered.push_back(id);
        return id;
    };
    ids.enc_w1 = reg("enc.w1", f.enc_w1);
    ids.enc_b1 = reg("enc.b1", f.enc_b1);
    ids.enc_w2 = reg("enc.w2", f.enc_w2);
    ids.enc_b2 = reg("enc.b2", f.enc_b2);
    for (size_t k = 0; k < f.layers.size(); ++k) {
        const CouplingLayer& L = f.layers[k];
        FlowParamNodes::LayerNodes ln;
        const std::string p = "layer" + std::to_string(k) + ".";
        ln.w1 = reg(p + "w1", L.w1);
        ln.b1 = reg(p + "b1", L.b1);
        ln.w2 = reg(p + "w2", L.w2);
        ln.b2 = reg(p + "b2", L.b2);
        ln.w3 = reg(p + "w3", L.w3);
        ln.b3 = reg(p + "b3", L.b3);
        ids.layers.push_back(ln);
    }
    return ids;
}

// Copies trained tape parameters back into the flow (ordered ids from
// register_flow_params with trainable=true).
inline void sync_params_from_graph(ConditionalFlow& f, Graph& g, const FlowParamNodes& ids) {
    size_t i = 0;
    f.for_each_param([&](const std::string& name, Tensor& t) {
        if (name == "cond_mean") return;
        t = g.value(ids.ordered[i++]);
    });
}

namespace detail {

inline NodeId append_conditioner(Graph& g, const FlowParamNodes::LayerNodes& L, NodeId pass,
                                 NodeId h) {
    const NodeId u = g.concat(pass, h, 1);
    const NodeId h1 = g.tanh(g.add(g.matmul(u, L.w1), L.b1));
    const NodeId h2 = g.tanh(g.add(g.matmul(h1, L.w2), L.b2));
    return g.add(g.matmul(h2, L.w3), L.b3);
}

} // namespace detail

// h = encoder(y) for a batched condition input y [B, C] -> [B, F].
inline NodeId append_condition_encoder(Graph& g, const FlowParamNodes& ids, NodeId y) {
    const NodeId h1 = g.tanh(g.add(g.matmul(y, ids.enc_w1), ids.enc_b1));
    return g.add(g.matmul(h1, ids.enc_w2), ids.enc_b2);
}

struct FlowForwardNodes {
    NodeId z;          // [B, D]
    NodeId logdet_sum; // scalar: sum of per-sample logdets over the batch
};

// Batched forward transform on the tape: x [B, D], h [B, F].
inline FlowForwardNodes append_flow_forward(Graph& g, const FlowArch& arch,
                                            const FlowParamNodes& ids, NodeId x, NodeId h) {
    NodeId v = x;
    NodeId logdet = -1;
    for (int k = 0; k < arch.layers; ++k) {
        const FlowParamNodes::LayerNodes& L = ids.layers[static_cast<size_t>(k)];
        const int64_t p = arch.passive_size(k);
        const int64_t t = arch.transformed_size(k);
        const bool front = arch.passive_is_front(k);
        const NodeId pass = g.slice(v, 1, front ? 0 : arch.dim - p, p);
        const NodeId act = g.slice(v, 1, front ? p : 0, t);
        const NodeId out = detail::append_conditioner(g, L, pass, h);
        const NodeId raw = g.slice(out, 1, 0, t);
        const NodeId shift = g.slice(out, 1, t, t);
        const NodeId lf = g.scale_shift(g.tanh(raw), arch.clamp, 0.0);
        const NodeId act2 = g.add(g.mul(act, g.exp(lf)), shift);
        v = front ? g.concat(pass, act2, 1) : g.concat(act2, pass, 1);
        const NodeId lsum = g.sum(lf);
        logdet = (logdet < 0) ? lsum : g.add(logdet, lsum);
    }
    return {v, logdet};
}

// Batched inverse transform on the tape: z [B, D], h [B, F] -> x [B, D].
inline NodeId append_flow_inverse(Graph& g, const FlowArch& arch, const FlowParamNodes& ids,
                                  NodeId z, NodeId h) {
    NodeId v = z;
    for (int k = arch.layers - 1; k >= 0; --k) {
        const FlowParamNodes::LayerNodes& L = ids.layers[static_cast<size_t>(k)];
        const int64_t p = arch.passive_size(k);
        const int64_t t = arch.transformed_size(k);
        const bool front = arch.passive_is_front(k);
        const NodeId pass = g.slice(v, 1, front ? 0 : arch.dim - p, p);
        const NodeId act = g.slice(v, 1, front ? p : 0, t);
        const NodeId out = detail::append_conditioner(g, L, pass, h);
        const NodeId raw = g.slice(out, 1, 0, t);
        const NodeId shift = g.slice(out, 1, t, t);
        const NodeId lf = g.scale_shift(g.tanh(raw), arch.clamp, 0.0);
        const NodeId act2 = g.mul(g.sub(act, shift), g.exp(g.scale_shift(lf, -1.0, 0.0)));
        v = front ? g.concat(pass, act2, 1) : g.concat(act2, pass, 1);
    }
    return v;
}

} // namespace flowcal
