#pragma once

// Adam with bias correction. The stepsize is supplied per call so callers
// can schedule per-epoch decay externally.

#include <cmath>
#include <vector>

#include "flowcal/autodiff.hpp"
#include "flowcal/tensor.hpp"

namespace flowcal {

struct AdamState {
    std::vector<Tensor> m; // first moments, one per parameter
    std::vector<Tensor> v; // second moments
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_params(const std::vector<const Tensor*>& params) {
        AdamState s;
        for (const Tensor* p : params) {
            s.m.emplace_back(p->shape());
            s.v.emplace_back(p->shape());
        }
        return s;
    }
};

inline void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                      AdamState& state, double stepsize) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ValidationError("adam_step: parameter/gradient/state counts differ");
    if (!(stepsize > 0.0) || !(state.beta1 > 0.0) || !(state.beta2 > 0.0) || !(state.eps > 0.0))
        throw ValidationError("adam_step: hyperparameters must be positive");
    for (size_t p = 0; p < params.size(); ++p) {
        if (!params[p]->same_shape(*grads[p]) || !params[p]->same_shape(state.m[p]))
            throw ValidationError("adam_step: shape mismatch at parameter " + std::to_string(p));
        if (!grads[p]->all_finite())
            throw DivergenceError("adam_step: non-finite gradient at parameter " + std::to_string(p));
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *params[p];
        const Tensor& g = *grads[p];
        Tensor& m = state.m[p];
        Tensor& v = state.v[p];
        for (int64_t i = 0; i < w.numel(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= stepsize * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// Convenience wrapper for graphs: steps every trainable parameter using the
// gradients of the last backward() pass.
inline void adam_step_graph(Graph& g, const std::vector<NodeId>& param_ids, AdamState& state,
                            double stepsize) {
    std::vector<Tensor*> params;
    std::vector<const Tensor*> grads;
    params.reserve(param_ids.size());
    grads.reserve(param_ids.size());
    for (NodeId id : param_ids) {
        params.push_back(&g.param_value(id));
        grads.push_back(&g.grad(id));
    }
    adam_step(params, grads, state, stepsize);
}

} // namespace flowcal
